import numpy as np

from tamba.scenario import Agent, AgentState, Category, Horizon, Polyline, Scenario

SEED = 7
OBSERVED = 6
FUTURE = 4
RATE = 10.0

TINY_MODEL = {
    "d": 8,
    "n_state": 4,
    "d_inner": 8,
    "d_ff": 16,
    "depth": 1,
    "conv_width": 4,
    "k_modes": 6,
    "observed": OBSERVED,
    "future": FUTURE,
    "scorer_hidden": 8,
}

TINY_GENERATOR = {
    "observed": OBSERVED,
    "future": FUTURE,
    "n_lanes": 2,
    "n_map_edges": 1,
    "n_sidewalks": 1,
    "lane_points": 4,
    "n_vehicles": 1,
    "n_pedestrians": 1,
    "traffic_light": True,
    "n_targets": 1,
}


def straight_agent(agent_id, category, start, velocity, observed=OBSERVED, rate=RATE):
    start, velocity = np.asarray(start, dtype=float), np.asarray(velocity, dtype=float)
    heading = float(np.arctan2(velocity[1], velocity[0]))
    states = []
    for step in range(observed):
        x, y = start + velocity * step / rate
        states.append(
            AgentState(
                x=float(x),
                y=float(y),
                heading=heading,
                vx=float(velocity[0]),
                vy=float(velocity[1]),
            )
        )
    return Agent(id=agent_id, category=category, states=states)


def two_agent_scenario(observed=OBSERVED, future=FUTURE, light=True):
    """One vehicle and one pedestrian next to a lane, optionally with a traffic light."""
    vehicle = straight_agent("vehicle_0", Category.VEHICLE, (1.0, -2.0), (6.0, 1.0), observed)
    pedestrian = straight_agent(
        "pedestrian_0", Category.PEDESTRIAN, (4.0, 3.0), (0.0, -1.2), observed
    )
    polylines = [
        Polyline(
            id="lane_0",
            category=Category.LANE,
            points=[[-5.0, -2.0], [0.0, -1.5], [5.0, -1.0], [10.0, -0.5]],
        )
    ]
    if light:
        states = [1.0 if step % 3 else 2.0 for step in range(observed)]
        light_row = [3.0, 1.0] + states
        polylines.append(
            Polyline(id="traffic_light_0", category=Category.TRAFFIC_LIGHT, points=[light_row])
        )
    final = vehicle.states[-1].position
    velocity = np.array([6.0, 1.0])
    future_points = [(final + velocity * (step + 1) / RATE).tolist() for step in range(future)]
    return Scenario(
        sample_rate_hz=RATE,
        horizon=Horizon(observed=observed, future=future),
        agents=[vehicle, pedestrian],
        map=polylines,
        targets=["vehicle_0"],
        ground_truth={"vehicle_0": future_points},
    )


def mixer_parameters(kind, d, d_inner, n_state, conv_width):
    """Parameters of one block outside the skeleton every kind shares."""
    if kind == "attention":
        return 3 * (d * d_inner + d_inner)
    front = d * d_inner + d_inner + conv_width * d_inner + d_inner
    if kind == "mamba":
        return front + n_state + 2 * n_state * d_inner + d_inner * d_inner
    a = d_inner * n_state + n_state
    b = d_inner * n_state * d_inner + n_state * d_inner
    c = d_inner * d_inner * n_state + d_inner * n_state
    dd = d_inner * d_inner * d_inner + d_inner * d_inner
    return front + a + b + c + dd


def expected_parameter_gap(config, kind, joint, track_width):
    """Parameter count of the ``(kind, joint)`` variant minus the joint Tamba one."""
    d = config.d
    widths = (d, config.d_inner, config.n_state, config.conv_width)
    n_blocks = 3 * config.depth + 2
    gap = n_blocks * (mixer_parameters(kind, *widths) - mixer_parameters("tamba", *widths))
    if not joint:
        embedder = track_width * d + d * d + 6 * d
        fusion = 2 * d * d + 3 * d
        gap += embedder - fusion
    return gap

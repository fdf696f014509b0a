from .common import SEED, TINY_GENERATOR, TINY_MODEL

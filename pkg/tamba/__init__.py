from tamba.harness import Harness as Harness  # pylint: disable=useless-import-alias
from tamba.model import TambaModel as TambaModel  # pylint: disable=useless-import-alias

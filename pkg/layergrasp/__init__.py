from .agent import DualLoopAgent
from .config import RunConfig, load_config
from .error_types import LayerGraspError

__version__ = '0.1.0'
__all__ = ['DualLoopAgent', 'RunConfig', 'load_config', 'LayerGraspError']

from .errors import *
from .tensor_nn import *
from .model_file import *
from .sim_env import *
from .agent_dqn import *
from .agent_pg import *
from .bench_harness import *

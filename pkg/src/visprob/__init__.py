"""Probabilistic visual-program engine.

Parses VisProg-style programs, compiles them into directed probabilistic
graphs, computes exact answer distributions by variable elimination, and
trains the invoked differentiable toy perception modules end to end from
final-answer labels alone.
"""

from .autodiff import DiffScalar, ParamStore, Tape, grad_check
from .dsl import (
    ModuleKind,
    ProgramAst,
    count_visual_steps,
    detect_shared_latents,
    format_program,
    parse_program,
)
from .engine import (
    brute_force,
    elimination_order,
    execute_argmax,
    infer,
    infer_exact,
    infer_factorized,
)
from .evalexpr import parse_eval
from .graph import build_graph, export_dot, export_json, topological_order
from .modules import ModuleSet, build_toy_modules, init_params
from .scene import Scene, SceneObject
from .training import TrainConfig, evaluate, nll_loss, train
from .values import Categorical, Detection, Region
from .vocab import Vocabularies
from .world import (
    CaseRecord,
    WorldConfig,
    disrupt_programs,
    gen_case,
    gen_dataset,
    gen_scene,
    intermediate_truth,
    load_dataset,
    save_dataset,
)

__version__ = "0.1.0"

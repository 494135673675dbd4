"""
BMLP - Behavior-aware MLP for heterogeneous sequential recommendation

Pipeline:
1. Ingest + preprocess - raw logs, dedup, purchase-count filtering
2. Split - last two purchases held out, sliding-window instances
3. HIP - token/channel mixing over the full heterogeneous sequence
4. PIP - per-behavior mixing over recent auxiliary events
5. Gate + scores - fused interest, softmax over all items
6. Evaluation - HR@k / NDCG@k, examined and intent groupings, scaling benchmark
"""

from .core.encoding import Variant, Vocab, build_vocab
from .core.model import Ablation, HyperParams, ModelParams, forward, param_count, train_step
from .core.checkpoint import load_checkpoint, save_checkpoint
from .core.trainer import Trainer
from .evaluation.analysis import EvalReport, evaluate
from .errors import BMLPError

__version__ = "0.1.0"
__all__ = [
    "Ablation",
    "BMLPError",
    "EvalReport",
    "HyperParams",
    "ModelParams",
    "Trainer",
    "Variant",
    "Vocab",
    "build_vocab",
    "evaluate",
    "forward",
    "load_checkpoint",
    "param_count",
    "save_checkpoint",
    "train_step",
]

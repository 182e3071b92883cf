"""Process-reward-guided MCTS with heuristics and fallacies memory."""

import json

from . import _core
from ._core import (
    BackendError,
    DomainError,
    SchemaError,
    class_of_value,
    next_value,
    step_weight,
    uct_score,
    value_of_class,
)

__version__ = _core.version()

__all__ = [
    "BackendError",
    "DomainError",
    "SchemaError",
    "class_of_value",
    "generate_problem",
    "label_tree",
    "main",
    "next_value",
    "search",
    "step_weight",
    "uct_score",
    "value_of_class",
]


def generate_problem(family="distractor_tree", depth=4, distractors=2, seed=0):
    """Synthetic problem as a dict."""
    return json.loads(_core.generate_problem_json(family, depth, distractors, seed))


def search(family="distractor_tree", depth=4, distractors=2, problem_seed=0, prm="noisy",
           noise=0.15, **config):
    """Runs the search on one synthetic problem.

    Keyword arguments not listed are search settings (num_rollouts,
    exploration_weight, memory_mode, seed, ...). Returns a dict with the
    answer, success flag, metrics, tree and memory dump.
    """
    return json.loads(
        _core.search_json(family, depth, distractors, problem_seed, json.dumps(config), prm, noise))


def label_tree(tree):
    """Step labels and preference pairs of a tree dict from search()."""
    return json.loads(_core.label_json(json.dumps(tree)))


def main(argv=None):
    """Entry point mirroring the prism executable."""
    import sys

    args = sys.argv[1:] if argv is None else list(argv)
    return _core.run_cli(args)

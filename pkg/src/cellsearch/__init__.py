"""Value-guided Monte Carlo tree search over code-executing agent sessions."""

from .engine import IterationReport, SearchEngine, SearchResult
from .gateway import Message, PolicyCandidate, SamplingParams
from .grading import Tolerance, compare_values, grade_answer, majority_vote, select_by_value
from .protocol import AnswerLabels, TaskSpec, TurnParse, parse_answer_labels, parse_turn
from .tree import SearchConfig, SearchNode, SearchTree, puct_score

__version__ = "0.1.0"

__all__ = [
    "AnswerLabels",
    "IterationReport",
    "Message",
    "PolicyCandidate",
    "SamplingParams",
    "SearchConfig",
    "SearchEngine",
    "SearchNode",
    "SearchResult",
    "SearchTree",
    "TaskSpec",
    "Tolerance",
    "TurnParse",
    "compare_values",
    "grade_answer",
    "majority_vote",
    "parse_answer_labels",
    "parse_turn",
    "puct_score",
    "select_by_value",
    "__version__",
]

"""PCTL fragment: reachability probabilities and reachability rewards."""

from amlas_rl.pctl.checker import (
    CheckResult,
    PctlUsageError,
    ProbResult,
    RewardResult,
    check_prob,
    check_reward,
    evaluate,
    satisfying,
)
from amlas_rl.pctl.formula import (
    TRUE,
    And,
    Atom,
    Eventually,
    FalseExpr,
    Not,
    Or,
    ProbQuery,
    RewardQuery,
    TrueExpr,
    Until,
    render,
)
from amlas_rl.pctl.parser import (
    NamedProperty,
    PctlError,
    PctlFileError,
    PctlSemanticError,
    PctlSyntaxError,
    parse,
    parse_properties,
)

MISSION_PROPERTIES = """\
# Mission-outcome properties (m: 0 travelling, 1 in unsafe zone, 2 collided, 3 goal reached)
C1: P>=0.6 [ F m=3 ]
C2: P<=0.1 [ F m=2 ]
R0: R{"unsafe"}=? [ F m=2 | m=3 | e=0 ]
"""

MISSION_PROPERTIES_TRANSPOSED = """\
# Same properties with the goal and collision mode values transposed; kept as a regression fixture
C1: P>=0.6 [ F m=2 ]
C2: P<=0.1 [ F m=3 ]
R0: R{"unsafe"}=? [ U m=2 ]
"""

"""Exception types shared across the package.

Every failure carries a short machine-readable ``code`` (for example
``"insufficient-distinct-areas"``) so that callers and the CLI can branch on
it without parsing messages.
"""

from __future__ import annotations

from typing import Any

# Codes that signal a numerical failure rather than bad input; the CLI maps
# these to exit status 3.
NUMERICAL_CODES = frozenset(
    {
        "varcomp-no-convergence",
        "degenerate-response",
        "study-failed",
    }
)


class SAEError(Exception):
    """Base error with a stable code string."""

    def __init__(self, code: str, message: str | None = None):
        self.code = code
        self.message = message or code
        super().__init__(f"{code}: {self.message}" if message else code)

    @property
    def numerical(self) -> bool:
        return self.code in NUMERICAL_CODES


class VarCompConvergenceError(SAEError):
    """Variance-component optimizer ran out of iterations.

    ``last`` holds the final iterate as a dict with keys ``sigma_gamma_sq``,
    ``sigma_sq``, ``loglik`` and ``iterations``.
    """

    def __init__(self, message: str, last: dict[str, Any]):
        super().__init__("varcomp-no-convergence", message)
        self.last = last

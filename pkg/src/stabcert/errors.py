"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``ValidationError`` -> 2,
``HypothesisError`` -> 4. Integrator escape is data, not an exception.
"""


class StabcertError(Exception):
    pass


class ValidationError(StabcertError):
    """Malformed input: bad expression, schema violation, bad argument."""


class HypothesisError(StabcertError):
    """A hypothesis of the stability theorems is not met (numerically)."""


class NumericalError(StabcertError):
    """A numerical routine failed to reach its requested accuracy."""

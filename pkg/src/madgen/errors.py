"""Exception hierarchy shared across the package.

All domain errors derive from MadgenError so the CLI can map them onto a
stable exit code (2 = user/data error) while unexpected exceptions stay
exit code 1.
"""


class MadgenError(Exception):
    """Base class for every package-specific error."""


class ParseError(MadgenError):
    """Malformed SMILES syntax (unclosed ring/branch, bad token)."""


class ValenceError(MadgenError):
    """An atom exceeds the allowed valence for its element/charge."""


class UnsupportedFeatureError(MadgenError):
    """Syntactically valid SMILES feature outside the supported subset."""


class CompositionError(MadgenError):
    """Scaffold atom composition is not a subset of the molecular formula."""


class FormatError(MadgenError):
    """Malformed spectrum file or chemical formula string."""


class MissingFieldError(MadgenError):
    """A required header (precursor m/z, formula) is absent."""


class EmptySpectrumError(MadgenError):
    """Operation requires at least one peak."""


class ZeroVectorError(MadgenError):
    """Cosine similarity is undefined for a zero embedding."""


class ConfigError(MadgenError):
    """Invalid or inconsistent run configuration."""


class EmptyPoolError(MadgenError):
    """Candidate ranking requires a non-empty scaffold pool."""


class MissingRecordError(MadgenError):
    """Oracle lookup has no entry for the requested record."""


class DataError(MadgenError):
    """Dataset records are internally inconsistent."""


class InsufficientScaffoldsError(MadgenError):
    """Scaffold-unique splitting needs at least three distinct scaffolds."""


class UncalibratedError(MadgenError):
    """Unconditional inference requested from a model trained without
    condition dropout."""

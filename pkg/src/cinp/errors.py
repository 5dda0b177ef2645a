"""Exception hierarchy.

Everything raised on purpose derives from :class:`CinpError`. Validation
failures (bad inputs, bad configs, bad files) derive from
:class:`CinpValidationError`; the CLI maps those to exit code 1 and
everything else unexpected to exit code 2.
"""


class CinpError(Exception):
    """Base class for all errors raised by this package."""


class CinpValidationError(CinpError):
    """Base class for precondition / validation failures."""


# --- tensor engine ---------------------------------------------------------

class ShapeMismatch(CinpValidationError):
    """Operand shapes do not conform to the operation's rule."""


class ZeroNorm(CinpValidationError):
    """Row normalization requested for an all-zero row."""


class NonScalarLoss(CinpValidationError):
    """backward / grad_check requires a single-element loss tensor."""


class MissingGradient(CinpValidationError):
    """Optimizer step requested for a parameter without a gradient."""


class StepOutOfRange(CinpValidationError):
    """Schedule queried outside [0, total_steps]."""


# --- synthetic data --------------------------------------------------------

class BadCohortSpec(CinpValidationError):
    """Cohort generation parameters are inconsistent."""


class ZeroVarianceRoi(CinpValidationError):
    """A BOLD row is constant; Pearson correlation is undefined."""


class BadRatio(CinpValidationError):
    """Mask ratio outside (0, 1)."""


# --- model / training ------------------------------------------------------

class BadConfig(CinpValidationError):
    """Encoder configuration violates its invariants."""


class BadTemperature(CinpValidationError):
    """Contrastive temperature must be strictly positive."""


class BadHyper(CinpValidationError):
    """Training hyperparameters are inconsistent."""


# --- prompting / evaluation ------------------------------------------------

class TooFewReferences(CinpValidationError):
    """A class has fewer embeddings than requested reference subsets."""


class TooFewSamples(CinpValidationError):
    """Not enough samples for a stratified split."""


class DegenerateLabels(CinpValidationError):
    """A class is absent from the training labels."""


class LengthMismatch(CinpValidationError):
    """Predictions / scores and labels differ in length."""


class AucOnMulticlass(CinpValidationError):
    """AUC requested for a non-binary problem."""


# --- config / persistence ---------------------------------------------------

class ParseError(CinpValidationError):
    """Config file is not valid JSON."""


class ValidationError(CinpValidationError):
    """Config value out of bounds; message names the offending field path."""


class UnknownKey(CinpValidationError):
    """Config contains a key the schema does not define."""


class CorruptCheckpoint(CinpError):
    """Checkpoint file has a bad magic, is truncated, or is inconsistent."""


class VersionMismatch(CinpError):
    """Checkpoint format version is not the one this build writes."""


class UsageError(CinpValidationError):
    """Bad command-line invocation; message names the flag."""

"""Exception types shared across the package.

Plain ``ValueError`` is used for invalid arguments (shape mismatches, bad
dimensions, out-of-range knobs); the classes here cover failure modes that
callers are expected to catch by name.
"""


class MmguideError(Exception):
    """Base class for package-specific failures."""


class NumericalDegeneracyError(MmguideError):
    """A computation hit a documented numerical floor (e.g. alpha_bar ~ 0)."""


class GuidanceDivergedError(MmguideError):
    """A guidance gradient became non-finite during sampling."""

    def __init__(self, step: int, t: int):
        super().__init__(f"non-finite guidance gradient at sampler step {step} (t={t})")
        self.step = step
        self.t = t


class TrainingDivergedError(MmguideError):
    """Training loss became non-finite."""


class ManifestBuildError(MmguideError):
    """Dataset manifest could not be built; lists every offending record."""

    def __init__(self, offenders: list[str]):
        super().__init__("manifest build failed:\n" + "\n".join(offenders))
        self.offenders = offenders


class ConfigError(MmguideError):
    """Run configuration failed validation; carries all violations."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(errors))
        self.errors = errors

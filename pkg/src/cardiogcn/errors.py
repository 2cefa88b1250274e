"""Exception hierarchy shared by all modules."""


class CardioGCNError(Exception):
    """Base class; ``module`` names the subsystem that raised it (used by the CLI)."""

    module = "cardiogcn"

    def record(self):
        return {"error": type(self).__name__, "module": self.module, "message": str(self)}


class ImagingError(CardioGCNError):
    module = "imaging_core"


class LabelAbsent(ImagingError):
    pass


class DegenerateGeometry(ImagingError):
    pass


class KeypointError(CardioGCNError):
    module = "keypoints"


class MissingStructure(KeypointError):
    def __init__(self, label):
        super().__init__(f"structure with label {label} is absent")
        self.label = label


class NoInterface(KeypointError):
    pass


class ContourTooShort(KeypointError):
    pass


class ZeroTangent(KeypointError):
    pass


class LayoutMismatch(KeypointError):
    pass


class EngineError(CardioGCNError):
    module = "nn_engine"


class ShapeMismatch(EngineError):
    pass


class ModelError(CardioGCNError):
    module = "gcn"


class EmptyDataset(ModelError):
    pass


class PhantomError(CardioGCNError):
    module = "phantom_data"


class InfeasibleGeometry(PhantomError):
    pass


class RetriesExhausted(PhantomError):
    pass


class MetricsError(CardioGCNError):
    module = "metrics_stats"


class DimensionMismatch(MetricsError):
    pass


class EmptyContour(MetricsError):
    pass


class AllZeroDifferences(MetricsError):
    pass


class LengthMismatch(MetricsError):
    pass


class ClinicalError(CardioGCNError):
    module = "clinical"


class MissingLandmark(ClinicalError):
    pass


class EmptyChord(ClinicalError):
    pass


class ViewMissing(ClinicalError):
    pass


class NonPositiveEDV(ClinicalError):
    pass


class NoUsableCycle(ClinicalError):
    pass


class AgreementError(CardioGCNError):
    module = "agreement"


class OutOfRange(AgreementError):
    pass


class InsufficientRecords(AgreementError):
    def __init__(self, available, requested, which="low"):
        super().__init__(f"only {available} {which} records available, {requested} requested")
        self.available = available
        self.requested = requested
        self.which = which


class BenchError(CardioGCNError):
    module = "bench"


class ModelLoadFailure(BenchError):
    pass


class ConfigError(CardioGCNError):
    module = "cli"

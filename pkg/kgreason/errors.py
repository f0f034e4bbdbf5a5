class KGReasonError(Exception):
    pass


class ShapeError(KGReasonError):
    pass


class ValidationError(KGReasonError):
    pass


class ParseError(ValidationError):
    def __init__(self, path, line_no, msg):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {msg}")


class UndefinedMetricError(KGReasonError):
    pass


class NonFiniteLossError(KGReasonError):
    def __init__(self, epoch: int, component: str, value: float):
        self.epoch = epoch
        self.component = component
        self.value = value
        super().__init__(f"non-finite {component} loss ({value}) at epoch {epoch}")


#
# Artifact Errors
#

class ArtifactError(KGReasonError):
    pass


class ArtifactVersionError(ArtifactError):
    pass


class TruncatedPayloadError(ArtifactError):
    pass


class ArtifactShapeError(ArtifactError):
    pass


class ChecksumError(ArtifactError):
    pass

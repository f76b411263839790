"""Exception hierarchy. Every error carries a stable ``code`` string."""


class VipttError(Exception):
    code = "VIPTT_ERROR"


def _make(name, code, base=VipttError):
    return type(name, (base,), {"code": code, "__module__": __name__})


# volume_io
MalformedHeader = _make("MalformedHeader", "MALFORMED_HEADER")
UnsupportedDatatype = _make("UnsupportedDatatype", "UNSUPPORTED_DATATYPE")
DimensionMismatch = _make("DimensionMismatch", "DIMENSION_MISMATCH")
TruncatedData = _make("TruncatedData", "TRUNCATED_DATA")
IOFailure = _make("IOFailure", "IO_FAILURE")
MalformedTensorFile = _make("MalformedTensorFile", "MALFORMED_TENSOR_FILE")

# preprocess
QueryOutOfRange = _make("QueryOutOfRange", "QUERY_OUT_OF_RANGE")
TooFewSamples = _make("TooFewSamples", "TOO_FEW_SAMPLES")
AlreadyNormalized = _make("AlreadyNormalized", "ALREADY_NORMALIZED")
BadChannelCount = _make("BadChannelCount", "BAD_CHANNEL_COUNT")

# dataset
MalformedManifest = _make("MalformedManifest", "MALFORMED_MANIFEST")
MissingFile = _make("MissingFile", "MISSING_FILE")
LabelOutOfRange = _make("LabelOutOfRange", "LABEL_OUT_OF_RANGE")
ClassTooSmall = _make("ClassTooSmall", "CLASS_TOO_SMALL")
EmptyClass = _make("EmptyClass", "EMPTY_CLASS")
EmptyDataset = _make("EmptyDataset", "EMPTY_DATASET")

# nn / model
ShapeMismatch = _make("ShapeMismatch", "SHAPE_MISMATCH")
BackwardBeforeForward = _make("BackwardBeforeForward", "BACKWARD_BEFORE_FORWARD")
ProbNotNormalized = _make("ProbNotNormalized", "PROB_NOT_NORMALIZED")
BadConfig = _make("BadConfig", "BAD_CONFIG")
MalformedCheckpoint = _make("MalformedCheckpoint", "MALFORMED_CHECKPOINT")
ConfigMismatch = _make("ConfigMismatch", "CONFIG_MISMATCH")

# metrics
LengthMismatch = _make("LengthMismatch", "LENGTH_MISMATCH")
DegenerateMarginals = _make("DegenerateMarginals", "DEGENERATE_MARGINALS")

"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class ReqtraceError(Exception):
    """Base class for all errors raised by the package."""


# corpus
class EmptyDocument(ReqtraceError):
    pass


class UnreadableFile(ReqtraceError):
    pass


class InvalidChunkConfig(ReqtraceError):
    pass


class DuplicateDocument(ReqtraceError):
    pass


# llm gateway
class CacheMiss(ReqtraceError):
    def __init__(self, key: str, tag: str = ""):
        super().__init__(f"no replay entry for request {key[:16]} (tag={tag or '-'})")
        self.key = key
        self.tag = tag


class ProviderError(ReqtraceError):
    pass


# extraction / parsing
class LlmProtocolError(ReqtraceError):
    """The model answered, but not in the format the stage asked for."""


class MalformedRecord(LlmProtocolError):
    def __init__(self, malformed_count: int):
        super().__init__(f"all {malformed_count} extraction record(s) were malformed")
        self.malformed_count = malformed_count


# graph index
class GraphFormatError(ReqtraceError):
    pass


class SchemaVersionMismatch(GraphFormatError):
    pass


# retrieval
class EmptyIndex(ReqtraceError):
    pass


class DimensionMismatch(ValueError, ReqtraceError):
    pass


class ZeroVector(ValueError, ReqtraceError):
    pass


# reasoner
class UnparseableVerdict(LlmProtocolError):
    pass


class UnparseableStage(LlmProtocolError):
    def __init__(self, stage: int, detail: str = ""):
        msg = f"stage {stage} output could not be parsed"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.stage = stage


class AgentCountMismatch(LlmProtocolError):
    def __init__(self, stage: int, found: int):
        super().__init__(f"stage {stage}: expected 3 agent blocks, found {found}")
        self.stage = stage
        self.found = found


# evaluation
class MissingGroundTruth(ReqtraceError):
    def __init__(self, req_id: str):
        super().__init__(f"no ground-truth pair for requirement {req_id!r}")
        self.req_id = req_id


# cli
class IndexNotFound(ReqtraceError):
    pass


class ConfigError(ReqtraceError):
    pass


class PipelineError(ReqtraceError):
    """An upstream failure, tagged with the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

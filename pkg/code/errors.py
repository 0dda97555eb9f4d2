"""Exception hierarchy shared by all modules."""

from typing import Optional


class PostFactumError(Exception):
    """Base class for every error raised by this package."""


class OrderingError(PostFactumError):
    """Signaling message pushed out of sequence order."""


class EmptyBufferError(PostFactumError):
    """Read from a signaling buffer that holds no message."""


class NonceExhaustedError(PostFactumError):
    """Nonce space used up; the session has to be aborted."""


class ContractError(PostFactumError):
    """Arguments violate an operation's precondition."""


class FramingError(PostFactumError):
    """Bit string has the wrong width for the requested layout."""


class TooShortError(PostFactumError):
    """Audio segment shorter than one feature frame."""


class ChannelConfigError(PostFactumError):
    """Invalid watermark channel configuration."""


class LotConfigError(PostFactumError):
    """Invalid Level-of-Trust configuration."""


class TerminalStateError(PostFactumError):
    """Transition requested on a verifier that already stopped."""


class SessionSetupError(PostFactumError):
    """Endpoints cannot start (or continue) a session."""


class WavFormatError(PostFactumError):
    """WAV file is not 16-bit mono PCM."""


class ScenarioError(PostFactumError):
    """Scenario or trace file failed to parse or validate."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")

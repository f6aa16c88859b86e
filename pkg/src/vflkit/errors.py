"""Exception hierarchy shared across the framework.

The CLI maps these onto stable exit codes (see ``vflkit.cli``):
connection problems -> 3, linkage failures -> 4, protocol violations -> 5.
"""


class VflkitError(Exception):
    """Base class for all framework errors."""


class ConfigError(VflkitError):
    """Invalid or unparseable run configuration."""


class FormatError(VflkitError):
    """Malformed file or wire frame: bad magic, version, checksum, truncation."""


class ShapeError(VflkitError, ValueError):
    """Matrix/layer dimension mismatch."""


class StateError(VflkitError):
    """Operation called in the wrong state (e.g. backward without forward)."""


class PsiError(VflkitError):
    """PSI-level failure: bad key, element outside the group subgroup."""


class LinkageError(VflkitError):
    """Data-resolution failure across parties."""


class EmptyIntersectionError(LinkageError):
    """The global ID intersection is empty; training is impossible."""


class ProtocolError(VflkitError):
    """Peer violated the message protocol (wrong type, order, or shape)."""


class TransportError(VflkitError):
    """Channel-level failure."""


class ChannelTimeout(TransportError):
    """No message arrived within the receive timeout."""


class ChannelClosed(TransportError):
    """The peer closed the channel."""

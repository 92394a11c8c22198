"""Architecture strings such as ``[CARV]x4`` or ``C-[V]x15``.

Grammar::

    config := group ('-' group)*
    group  := letter | '[' letter+ ']' ('x' | '×') int
    letter := C | A | R | V      (case-insensitive)
"""
from dataclasses import dataclass, field

from .errors import ConfigError, ConfigLengthError, ConfigParseError
from .pdc import PdcKind

N_BLOCKS = 16
# (number of blocks, width multiplier) per stage; stage 1 counts the initial conv
PIDINET_STAGES = ((4, 1), (4, 2), (4, 4), (4, 4))
DEFAULT_CDCM_CHANNELS = 24

_LETTERS = "CARV"


class _Parser:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else None

    def fail(self, msg):
        raise ConfigParseError(msg, self.pos)

    def letter(self):
        ch = self.peek()
        if ch is None or ch.upper() not in _LETTERS:
            self.fail(f"expected one of C/A/R/V, found {ch!r}" if ch else "unexpected end of input")
        self.pos += 1
        return PdcKind(ch.upper())

    def integer(self):
        start = self.pos
        while self.peek() is not None and self.peek().isdigit():
            self.pos += 1
        if start == self.pos:
            self.fail("expected a repeat count")
        return int(self.text[start:self.pos])

    def group(self):
        if self.peek() != "[":
            return [self.letter()]
        self.pos += 1
        pattern = [self.letter()]
        while self.peek() != "]":
            if self.peek() is None:
                self.fail("unterminated '['")
            pattern.append(self.letter())
        self.pos += 1
        if self.peek() not in ("x", "X", "×"):
            self.fail("expected 'x' after ']'")
        self.pos += 1
        return pattern * self.integer()

    def config(self):
        if not self.text:
            self.fail("empty config")
        kinds = self.group()
        while self.peek() is not None:
            if self.peek() != "-":
                self.fail(f"unexpected character {self.peek()!r}")
            self.pos += 1
            kinds += self.group()
        return kinds


def parse_config(text, length=N_BLOCKS):
    """Expand a config string into a list of PdcKind, checking its length."""
    kinds = _Parser(text.strip()).config()
    if length is not None and len(kinds) != length:
        raise ConfigLengthError(len(kinds), length)
    return kinds


def render_config(kinds):
    """Canonical string for a block sequence.

    Uses ``[P]xn`` for the shortest pattern P that tiles the whole sequence
    (when it repeats at least twice), otherwise run-length groups joined by '-'.
    """
    s = "".join(PdcKind(k).value for k in kinds)
    n = len(s)
    for size in range(1, n // 2 + 1):
        if n % size == 0 and s[:size] * (n // size) == s:
            return f"[{s[:size]}]x{n // size}"
    parts = []
    i = 0
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        parts.append(s[i] if j - i == 1 else f"[{s[i]}]x{j - i}")
        i = j
    return "-".join(parts)


@dataclass
class ArchConfig:
    blocks: list
    base_channels: int = 60
    cdcm_channels: int = DEFAULT_CDCM_CHANNELS
    use_csam: bool = True
    use_cdcm: bool = True
    stages: tuple = field(default=PIDINET_STAGES)

    def __post_init__(self):
        self.blocks = [PdcKind(b) for b in self.blocks]
        expected = sum(n for n, _ in self.stages)
        if len(self.blocks) != expected:
            raise ConfigLengthError(len(self.blocks), expected)
        if self.base_channels < 1:
            raise ConfigError(f"base channels must be positive, got {self.base_channels}")
        if self.use_cdcm and not 0 < self.cdcm_channels < self.base_channels:
            raise ConfigError(
                f"CDCM channels M={self.cdcm_channels} must satisfy 0 < M < C={self.base_channels}")

    @classmethod
    def from_string(cls, text, base_channels=60, use_csam=True, use_cdcm=True,
                    cdcm_channels=None):
        if cdcm_channels is None:
            cdcm_channels = min(DEFAULT_CDCM_CHANNELS, base_channels - 1)
        return cls(parse_config(text), base_channels, cdcm_channels, use_csam, use_cdcm)

    @property
    def text(self):
        return render_config(self.blocks)

    def stage_widths(self):
        return [self.base_channels * mult for _, mult in self.stages]

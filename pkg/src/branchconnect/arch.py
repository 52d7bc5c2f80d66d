"""Architecture files in appendix-table notation, and the base -> BranchConnect reshape.

One layer per line, ``#`` starts a comment::

    INPUT: 3x32x32
    INIT: Random            # or "Random,0.01" or "MSRA"
    CONV: 5x5,32            # optional ",stride=1,pad=2"; default pad keeps odd kernels "same"
    POOL: 3x3,Max,2         # window, Max|Ave, stride; optional ",pad=0"
    POOL: global,Ave        # global average pooling
    LRN                     # parsed as identity (warned)
    FC: 64
    FC: 100

ReLU is implicit after every CONV and FC except the classifier.  A reshaped
file adds ``M:``/``K:`` lines and ``STEM``/``BRANCH``/``HEAD`` section markers,
with ``FC_Gates: C`` or ``CONV_Gates: 1x1,C`` + ``POOL: global,Ave`` as head.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace

from .kernels import out_size, pool_out_size

log = logging.getLogger(__name__)

SECTIONS = ("STEM", "BRANCH", "HEAD")


class ArchSpecError(ValueError):
    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class Layer:
    kind: str  # conv pool fc lrn relu flatten fc_gates conv_gates
    kh: int = 0
    kw: int = 0
    filters: int = 0
    units: int = 0
    pool_type: str = ""  # max | avg
    stride: int = 1
    pad: int = 0
    is_global: bool = False
    line: int | None = field(default=None, compare=False)

    @property
    def trainable(self):
        return self.kind in ("conv", "fc", "fc_gates", "conv_gates")

    def text(self):
        if self.kind in ("conv", "conv_gates"):
            tag = "CONV" if self.kind == "conv" else "CONV_Gates"
            s = f"{tag}: {self.kh}x{self.kw},{self.filters}"
            if self.stride != 1:
                s += f",stride={self.stride}"
            if self.pad != default_conv_pad(self.kh, self.kw):
                s += f",pad={self.pad}"
            return s
        if self.kind == "pool":
            t = "Max" if self.pool_type == "max" else "Ave"
            if self.is_global:
                return f"POOL: global,{t}"
            s = f"POOL: {self.kh}x{self.kw},{t},{self.stride}"
            if self.pad:
                s += f",pad={self.pad}"
            return s
        if self.kind == "fc":
            return f"FC: {self.units}"
        if self.kind == "fc_gates":
            return f"FC_Gates: {self.units}"
        return self.kind.upper()


def default_conv_pad(kh, kw):
    return (min(kh, kw) - 1) // 2


@dataclass
class BaseArchSpec:
    layers: list
    input_shape: tuple
    num_classes: int
    P_c: int
    P_f: int
    shapes: list  # output shape after each layer
    init: tuple = ("random", 0.01)

    @property
    def head_kind(self):
        return "conv_gates" if self.P_f == 0 else "fc_gates"


@dataclass
class BranchNetSpec:
    input_shape: tuple
    stem: list
    branch: list
    head: list
    M: int
    K: int
    init: tuple = ("random", 0.01)

    @property
    def head_kind(self):
        return self.head[0].kind

    @property
    def num_classes(self):
        h = self.head[0]
        return h.units if h.kind == "fc_gates" else h.filters

    def shapes(self):
        """(stem output, branch output E_m, logits) shapes for one example."""
        s = walk_shapes(self.stem, self.input_shape)
        stem_out = s[-1] if s else self.input_shape
        b = walk_shapes(self.branch, stem_out)
        return stem_out, b[-1] if b else stem_out, (self.num_classes,)


# ---------------------------------------------------------------- parsing

_NUM = r"(\d+)"
_KSIZE = re.compile(r"^\s*(\d+)\s*[x×X]\s*(\d+)\s*$")


def _kv_opts(parts, allowed, lineno):
    opts = {}
    for p in parts:
        if "=" not in p:
            raise ArchSpecError(f"unexpected field {p.strip()!r}", lineno)
        k, v = (s.strip().lower() for s in p.split("=", 1))
        if k not in allowed:
            raise ArchSpecError(f"unknown option {k!r}", lineno)
        try:
            opts[k] = int(v)
        except ValueError:
            raise ArchSpecError(f"option {k} needs an integer, got {v!r}", lineno) from None
    return opts


def _ksize(text, lineno):
    m = _KSIZE.match(text)
    if not m:
        raise ArchSpecError(f"bad kernel size {text.strip()!r} (expected e.g. 5x5)", lineno)
    return int(m.group(1)), int(m.group(2))


def _int(text, what, lineno):
    try:
        v = int(text.strip())
    except ValueError:
        raise ArchSpecError(f"{what} must be an integer, got {text.strip()!r}", lineno) from None
    if v < 1:
        raise ArchSpecError(f"{what} must be positive, got {v}", lineno)
    return v


def parse_layer(key, value, lineno):
    key_u = key.upper()
    parts = [p for p in value.split(",")] if value else []
    if key_u in ("CONV", "CONV_GATES"):
        if len(parts) < 2:
            raise ArchSpecError(f"{key} needs '<kh>x<kw>,<filters>'", lineno)
        kh, kw = _ksize(parts[0], lineno)
        filters = _int(parts[1], "number of filters", lineno)
        opts = _kv_opts(parts[2:], ("stride", "pad"), lineno)
        return Layer("conv" if key_u == "CONV" else "conv_gates", kh=kh, kw=kw, filters=filters,
                     stride=opts.get("stride", 1), pad=opts.get("pad", default_conv_pad(kh, kw)),
                     line=lineno)
    if key_u == "POOL":
        if len(parts) >= 1 and parts[0].strip().lower() == "global":
            if len(parts) != 2:
                raise ArchSpecError("global pooling is 'POOL: global,Ave'", lineno)
            ptype = _pool_type(parts[1], lineno)
            if ptype != "avg":
                raise ArchSpecError("only global average pooling is supported", lineno)
            return Layer("pool", pool_type="avg", is_global=True, line=lineno)
        if len(parts) < 3:
            raise ArchSpecError("POOL needs '<k>x<k>,<Max|Ave>,<stride>'", lineno)
        kh, kw = _ksize(parts[0], lineno)
        if kh != kw:
            raise ArchSpecError(f"pooling windows must be square, got {kh}x{kw}", lineno)
        ptype = _pool_type(parts[1], lineno)
        stride = _int(parts[2], "pool stride", lineno)
        opts = _kv_opts(parts[3:], ("pad",), lineno)
        return Layer("pool", kh=kh, kw=kw, pool_type=ptype, stride=stride,
                     pad=opts.get("pad", 0), line=lineno)
    if key_u in ("FC", "FC_GATES"):
        if len(parts) != 1:
            raise ArchSpecError(f"{key} needs a single unit count", lineno)
        units = _int(parts[0], "number of output units", lineno)
        return Layer("fc" if key_u == "FC" else "fc_gates", units=units, line=lineno)
    if key_u in ("LRN", "RELU", "FLATTEN"):
        if value.strip():
            raise ArchSpecError(f"{key} takes no arguments", lineno)
        if key_u == "LRN":
            log.warning("line %d: LRN is executed as identity", lineno)
        return Layer(key_u.lower(), line=lineno)
    raise ArchSpecError(f"unknown layer kind {key!r}", lineno)


def _pool_type(text, lineno):
    t = text.strip().lower()
    if t == "max":
        return "max"
    if t in ("ave", "avg", "average"):
        return "avg"
    raise ArchSpecError(f"pool type must be Max or Ave, got {text.strip()!r}", lineno)


def _split_line(raw):
    line = raw.split("#", 1)[0].strip()
    if not line:
        return None, None
    if ":" in line:
        k, v = line.split(":", 1)
        return k.strip(), v.strip()
    return line, ""


def _parse_input(value, lineno):
    dims = re.split(r"\s*[x×X]\s*", value.strip())
    try:
        dims = tuple(int(d) for d in dims)
    except ValueError:
        raise ArchSpecError(f"bad INPUT {value!r}", lineno) from None
    if len(dims) == 2:
        dims = (3,) + dims
    if len(dims) not in (1, 3) or min(dims) < 1:
        raise ArchSpecError(f"INPUT must be CxHxW, HxW or D, got {value!r}", lineno)
    return dims


def _parse_init(value, lineno):
    parts = [p.strip() for p in value.split(",")]
    kind = parts[0].lower()
    if kind == "random":
        std = 0.01
        if len(parts) > 1:
            try:
                std = float(parts[1])
            except ValueError:
                raise ArchSpecError(f"bad init std {parts[1]!r}", lineno) from None
        return ("random", std)
    if kind == "msra" and len(parts) == 1:
        return ("msra",)
    raise ArchSpecError(f"INIT must be Random[,std] or MSRA, got {value!r}", lineno)


def _format_init(init):
    if init[0] == "msra":
        return "MSRA"
    return "Random" if init[1] == 0.01 else f"Random,{init[1]!r}"


# ---------------------------------------------------------------- shapes


def layer_output_shape(layer: Layer, shape, lineno=None):
    lineno = layer.line if lineno is None else lineno
    k = layer.kind
    if k in ("lrn", "relu"):
        return shape
    if k == "flatten":
        return (_prod(shape),)
    if k in ("fc", "fc_gates"):
        return (layer.units,)
    if len(shape) != 3:
        raise ArchSpecError(f"{layer.text()} needs a CxHxW input, got {_fmt(shape)}", lineno)
    c, h, w = shape
    if k in ("conv", "conv_gates"):
        if layer.kh > h + 2 * layer.pad or layer.kw > w + 2 * layer.pad:
            raise ArchSpecError(
                f"{layer.kh}x{layer.kw} kernel exceeds {h}x{w} input (pad {layer.pad})", lineno)
        oh = out_size(h, layer.kh, layer.stride, layer.pad)
        ow = out_size(w, layer.kw, layer.stride, layer.pad)
        return (layer.filters, oh, ow)
    if k == "pool":
        if layer.is_global:
            return (c, 1, 1)
        if layer.kh > h + 2 * layer.pad or layer.kw > w + 2 * layer.pad:
            raise ArchSpecError(f"{layer.kh}x{layer.kw} pool window exceeds {h}x{w} input", lineno)
        return (c, pool_out_size(h, layer.kh, layer.stride, layer.pad),
                pool_out_size(w, layer.kw, layer.stride, layer.pad))
    raise ArchSpecError(f"unknown layer kind {k!r}", lineno)


def walk_shapes(layers, in_shape):
    shapes = []
    shape = tuple(in_shape)
    for layer in layers:
        shape = layer_output_shape(layer, shape)
        shapes.append(shape)
    return shapes


def _prod(shape):
    p = 1
    for d in shape:
        p *= d
    return p


def _fmt(shape):
    return "x".join(str(d) for d in shape)


# ---------------------------------------------------------------- top-level parse


def parse_arch_spec(text: str) -> BaseArchSpec:
    """Parse a plain (unsectioned) base architecture."""
    input_shape = (3, 32, 32)
    init = ("random", 0.01)
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        key, value = _split_line(raw)
        if key is None:
            continue
        ku = key.upper()
        if ku == "INPUT":
            input_shape = _parse_input(value, lineno)
        elif ku == "INIT":
            init = _parse_init(value, lineno)
        elif ku in SECTIONS or ku in ("M", "K"):
            raise ArchSpecError(f"{key} belongs in a reshaped (sectioned) file", lineno)
        else:
            layers.append(parse_layer(key, value, lineno))
    if not layers:
        raise ArchSpecError("architecture has no layers")
    for lay in layers:
        if lay.kind in ("fc_gates", "conv_gates"):
            raise ArchSpecError(f"{lay.text()} only appears in reshaped files", lay.line)
    shapes = walk_shapes(layers, input_shape)
    last = layers[-1]
    P_f = sum(1 for lay in layers if lay.kind == "fc")
    P_c = sum(1 for lay in layers if lay.kind == "conv")
    if P_f:
        if last.kind != "fc":
            raise ArchSpecError("the classifier (last layer) must be FC when FC layers are present",
                                last.line)
        first_fc = next(i for i, lay in enumerate(layers) if lay.kind == "fc")
        if any(lay.kind in ("conv", "pool") for lay in layers[first_fc:]):
            raise ArchSpecError("convolution/pooling after a fully-connected layer",
                                layers[first_fc].line)
        C = last.units
    else:
        if len(layers) < 2 or layers[-2].kind != "conv" or not (last.kind == "pool" and last.is_global):
            raise ArchSpecError("without FC layers the spec must end with CONV: <k>,C + POOL: global,Ave",
                                last.line)
        C = layers[-2].filters
    if C < 2:
        raise ArchSpecError(f"need at least 2 classes, got {C}", last.line)
    return BaseArchSpec(layers, input_shape, C, P_c, P_f, shapes, init)


def reshape_to_branchconnect(base: BaseArchSpec, M: int, K: int) -> BranchNetSpec:
    """Stem = all but the last conv stage; branch = last conv stage + all but the last FC."""
    if M < 1:
        raise ArchSpecError(f"M must be >= 1, got {M}")
    if not 1 <= K <= M:
        raise ArchSpecError(f"K must satisfy 1 <= K <= M, got K={K}, M={M}")
    if base.P_c < 1:
        raise ArchSpecError("base model has no convolutional layer to move into the branches")
    layers = list(base.layers)
    if base.P_f:
        first_fc = next(i for i, lay in enumerate(layers) if lay.kind == "fc")
        conv_part, fcs = layers[:first_fc], layers[first_fc:]
        hidden, classifier = fcs[:-1], fcs[-1]
        head = [Layer("fc_gates", units=classifier.units)]
    else:
        conv_part, hidden = layers[:-2], []
        cls = layers[-2]
        if (cls.kh, cls.kw) != (1, 1):
            raise ArchSpecError("only 1x1 gated classifier convolutions are supported", cls.line)
        head = [replace(cls, kind="conv_gates", line=None), replace(layers[-1], line=None)]
    conv_idx = [i for i, lay in enumerate(conv_part) if lay.kind == "conv"]
    if not conv_idx:
        raise ArchSpecError("reshaping would leave an empty branch (no convolution before the classifier)")
    cut = conv_idx[-1]
    stem = [replace(lay, line=None) for lay in conv_part[:cut]]
    branch = [replace(lay, line=None) for lay in conv_part[cut:] + hidden]
    if M == 1:
        log.warning("M=1: degenerate single-branch network")
    spec = BranchNetSpec(base.input_shape, stem, branch, head, M, K, base.init)
    validate_branchnet(spec)
    return spec


def validate_branchnet(spec: BranchNetSpec):
    if not spec.branch:
        raise ArchSpecError("branch template is empty")
    if not spec.head or spec.head[0].kind not in ("fc_gates", "conv_gates"):
        raise ArchSpecError("HEAD must start with FC_Gates or CONV_Gates")
    if spec.head[0].kind == "conv_gates":
        h = spec.head[0]
        if (h.kh, h.kw) != (1, 1):
            raise ArchSpecError("CONV_Gates must be 1x1", h.line)
        if len(spec.head) != 2 or not spec.head[1].is_global:
            raise ArchSpecError("CONV_Gates head must be followed by POOL: global,Ave", h.line)
    elif len(spec.head) != 1:
        raise ArchSpecError("an FC_Gates head is a single layer", spec.head[1].line)
    if not 1 <= spec.K <= spec.M:
        raise ArchSpecError(f"K must satisfy 1 <= K <= M, got K={spec.K}, M={spec.M}")
    stem_out, e_shape, _ = spec.shapes()
    walk_shapes(spec.head, e_shape)
    for lay in spec.stem + spec.branch:
        if lay.kind in ("fc_gates", "conv_gates"):
            raise ArchSpecError(f"{lay.text()} only belongs in HEAD", lay.line)


def parse_branchnet_spec(text: str, M: int | None = None, K: int | None = None) -> BranchNetSpec:
    """Sectioned file.  ``M``/``K`` fill in when the file has no M:/K: lines."""
    input_shape = (3, 32, 32)
    init = ("random", 0.01)
    sections = {s: [] for s in SECTIONS}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        key, value = _split_line(raw)
        if key is None:
            continue
        ku = key.upper()
        if ku in SECTIONS and not value:
            current = ku
        elif ku == "INPUT":
            input_shape = _parse_input(value, lineno)
        elif ku == "INIT":
            init = _parse_init(value, lineno)
        elif ku == "M":
            M = _int(value, "M", lineno)
        elif ku == "K":
            K = _int(value, "K", lineno)
        else:
            if current is None:
                raise ArchSpecError("layer outside STEM/BRANCH/HEAD section", lineno)
            sections[current].append(parse_layer(key, value, lineno))
    if M is None or K is None:
        raise ArchSpecError("sectioned spec needs 'M:' and 'K:' lines (or M, K given separately)")
    spec = BranchNetSpec(input_shape, sections["STEM"], sections["BRANCH"], sections["HEAD"],
                         M, K, init)
    validate_branchnet(spec)
    return spec


def is_sectioned(text: str) -> bool:
    for raw in text.splitlines():
        key, value = _split_line(raw)
        if key is not None and key.upper() in SECTIONS and not value:
            return True
    return False


def load_branchnet(text: str, M: int | None = None, K: int | None = None) -> BranchNetSpec:
    """Accept either a base file (reshaped with M, K) or an already-sectioned file."""
    if is_sectioned(text):
        spec = parse_branchnet_spec(text, M, K)
        if M is not None or K is not None:
            spec = replace(spec, M=M if M is not None else spec.M, K=K if K is not None else spec.K)
            validate_branchnet(spec)
        return spec
    if M is None or K is None:
        raise ArchSpecError("a base architecture needs M and K to be reshaped")
    return reshape_to_branchconnect(parse_arch_spec(text), M, K)


def format_branchnet(spec: BranchNetSpec) -> str:
    lines = [f"INPUT: {_fmt(spec.input_shape)}"]
    if spec.init != ("random", 0.01):
        lines.append(f"INIT: {_format_init(spec.init)}")
    lines += [f"M: {spec.M}", f"K: {spec.K}"]
    for name, layers in zip(SECTIONS, (spec.stem, spec.branch, spec.head)):
        lines.append(name)
        lines += [lay.text() for lay in layers]
    return "\n".join(lines) + "\n"


def format_base(spec: BaseArchSpec) -> str:
    lines = [f"INPUT: {_fmt(spec.input_shape)}"]
    if spec.init != ("random", 0.01):
        lines.append(f"INIT: {_format_init(spec.init)}")
    lines += [lay.text() for lay in spec.layers]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- parameter counts


def _layer_params(layer: Layer, in_shape):
    if layer.kind in ("conv", "conv_gates"):
        return layer.filters * in_shape[0] * layer.kh * layer.kw + layer.filters
    if layer.kind in ("fc", "fc_gates"):
        return _prod(in_shape) * layer.units + layer.units
    return 0


def _section_params(layers, in_shape):
    total = 0
    shape = tuple(in_shape)
    for layer in layers:
        total += _layer_params(layer, shape)
        shape = layer_output_shape(layer, shape)
    return total, shape


def parameter_breakdown(spec: BranchNetSpec):
    stem, stem_out = _section_params(spec.stem, spec.input_shape)
    branch, e_shape = _section_params(spec.branch, stem_out)
    head, _ = _section_params(spec.head, e_shape)
    return {"stem": stem, "branch": branch, "head": head,
            "total": stem + spec.M * branch + head, "gates": spec.num_classes * spec.M}


def count_parameters(spec) -> int:
    """Trainable scalars, gates excluded (see ``parameter_breakdown`` for C*M)."""
    if isinstance(spec, BaseArchSpec):
        return _section_params(spec.layers, spec.input_shape)[0]
    return parameter_breakdown(spec)["total"]

"""Module-specific low-rank adapters.

Every adaptable layer is a host with an ``adapter`` slot: ``AdaptedLinear``
and ``AdaptedConv2d`` add the low-rank delta of their own input, while
``AdapterSlot`` carries a delta applied to an arbitrary intermediate (used
for the spatial branch of denoiser blocks). Adapters for one channel kind
live together in an ``AdapterSet`` keyed by layer path, so a whole set can
be attached, detached, or hot-swapped atomically.
"""

from __future__ import annotations

import hashlib
import io
import math
from contextlib import contextmanager
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

ADAPTER_ROLES = ("encoder", "decoder", "denoiser", "classifier")
DEFAULT_RANKS = {"encoder": 16, "decoder": 16, "denoiser": 8, "classifier": 4}
ADAPTER_FORMAT_VERSION = 1


class AdapterError(ValueError):
    """Invalid adapter specification or attachment."""


class AdapterFormatError(AdapterError):
    """Adapter file is corrupt or not an adapter payload."""


class AdapterCompatibilityError(AdapterError):
    """Adapter file does not match the model it is being loaded against."""


@dataclass(frozen=True)
class AdapterSpec:
    """Role-specific rank and scaling. scale = alpha_hat / rank (default 1)."""

    role: str
    rank: int
    alpha_hat: float | None = None

    def __post_init__(self):
        if self.role not in ADAPTER_ROLES:
            raise AdapterError(f"unknown adapter role {self.role!r}, expected one of {ADAPTER_ROLES}")
        if self.rank < 1:
            raise AdapterError(f"adapter rank must be >= 1, got {self.rank}")

    @property
    def scale(self) -> float:
        alpha_hat = self.rank if self.alpha_hat is None else self.alpha_hat
        return alpha_hat / self.rank

    def with_rank(self, rank: int) -> "AdapterSpec":
        # keep the effective scale when deriving e.g. the doubled qkv rank
        alpha_hat = self.scale * rank
        return replace(self, rank=rank, alpha_hat=alpha_hat)


def default_specs(overrides: dict[str, int] | None = None) -> dict[str, AdapterSpec]:
    ranks = dict(DEFAULT_RANKS)
    if overrides:
        ranks.update(overrides)
    return {role: AdapterSpec(role, rank) for role, rank in ranks.items()}


def _init_a_matrix(a: torch.Tensor, role: str, rng: torch.Generator) -> None:
    rank, k = a.shape
    if role in ("encoder", "denoiser"):
        bound = math.sqrt(6.0 / rank)
        a.uniform_(-bound, bound, generator=rng)
    elif role == "decoder":
        a.normal_(0.0, 0.02, generator=rng)
    else:  # classifier
        bound = math.sqrt(6.0 / (rank + k))
        a.uniform_(-bound, bound, generator=rng)


class AdapterPair(nn.Module):
    """Dense low-rank update: delta(x) = scale * B (A x), with B zero at init."""

    def __init__(self, d: int, k: int, spec: AdapterSpec, rng: torch.Generator):
        super().__init__()
        if spec.rank > min(d, k):
            raise AdapterError(f"rank {spec.rank} exceeds min(d={d}, k={k})")
        self.role = spec.role
        self.rank = spec.rank
        self.scale = spec.scale
        self.a = nn.Parameter(torch.empty(spec.rank, k))
        self.b = nn.Parameter(torch.zeros(d, spec.rank))
        with torch.no_grad():
            _init_a_matrix(self.a, spec.role, rng)

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(F.linear(x, self.a), self.b) * self.scale

    def merged(self) -> torch.Tensor:
        """Dense delta-W = scale * B A (test and export helper)."""
        return self.scale * (self.b @ self.a)

    @property
    def param_count(self) -> int:
        return self.a.numel() + self.b.numel()

    @property
    def extra_ops_per_vector(self) -> int:
        # multiply-adds for A x then B (.): r*k + d*r
        d, r = self.b.shape
        return r * (d + self.a.shape[1])


class KroneckerConvAdapter(nn.Module):
    """Conv update delta-W[o,i] = (U V)[o,i] * B_spatial, applied low-rank.

    B_spatial is a single shared k x k kernel (zero at init); the channel
    factor U V is itself rank-limited so parameters stay at
    k^2 + r (C_out + C_in).
    """

    def __init__(
        self,
        c_out: int,
        c_in: int,
        kernel_size: int,
        spec: AdapterSpec,
        rng: torch.Generator,
        padding: int | None = None,
    ):
        super().__init__()
        if spec.rank > min(c_out, c_in):
            raise AdapterError(f"rank {spec.rank} exceeds min(C_out={c_out}, C_in={c_in})")
        self.role = spec.role
        self.rank = spec.rank
        self.scale = spec.scale
        self.padding = kernel_size // 2 if padding is None else padding
        self.b_spatial = nn.Parameter(torch.zeros(kernel_size, kernel_size))
        self.u = nn.Parameter(torch.empty(c_out, spec.rank))
        self.v = nn.Parameter(torch.empty(spec.rank, c_in))
        with torch.no_grad():
            _init_a_matrix(self.u.T, spec.role, rng)
            _init_a_matrix(self.v, spec.role, rng)

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        # channel-reduce first so the spatial conv runs on rank channels
        v = torch.einsum("rc,bchw->brhw", self.v, x)
        k = self.b_spatial.shape[0]
        kernel = self.b_spatial.expand(self.rank, 1, k, k).contiguous()
        s = F.conv2d(v, kernel, padding=self.padding, groups=self.rank)
        return self.scale * torch.einsum("or,brhw->bohw", self.u, s)

    def merged(self) -> torch.Tensor:
        """Full conv kernel delta (C_out, C_in, k, k)."""
        return self.scale * torch.einsum("oi,fg->oifg", self.u @ self.v, self.b_spatial)

    @property
    def param_count(self) -> int:
        return self.b_spatial.numel() + self.u.numel() + self.v.numel()


def init_adapter(spec: AdapterSpec, d: int, k: int, rng: torch.Generator) -> AdapterPair:
    """Fresh dense adapter for a d x k weight matrix; delta-W is zero at init."""
    return AdapterPair(d, k, spec, rng)


def adapted_forward(weight: torch.Tensor, pair: AdapterPair, x: torch.Tensor) -> torch.Tensor:
    """W x + scale * B (A x), never materializing B A."""
    if weight.shape[1] != x.shape[-1]:
        raise AdapterError(f"weight {tuple(weight.shape)} incompatible with input {tuple(x.shape)}")
    if pair.a.shape[1] != weight.shape[1] or pair.b.shape[0] != weight.shape[0]:
        raise AdapterError(
            f"adapter ({pair.b.shape[0]} x {pair.a.shape[1]}) does not fit weight {tuple(weight.shape)}"
        )
    return F.linear(x, weight) + pair.delta(x)


class _AdapterHost:
    """Mixin managing the optional adapter slot on a layer."""

    def _init_slot(self):
        self.add_module("adapter", None)

    def set_adapter(self, adapter: nn.Module | None) -> None:
        if adapter is not None:
            self._check_adapter(adapter)
        self.adapter = adapter

    def _check_adapter(self, adapter: nn.Module) -> None:
        raise NotImplementedError


class AdaptedLinear(nn.Linear, _AdapterHost):
    """nn.Linear with an optional low-rank adapter on its weight."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__(in_features, out_features, bias=bias)
        self._init_slot()

    def _check_adapter(self, adapter: nn.Module) -> None:
        if not isinstance(adapter, AdapterPair):
            raise AdapterError(f"linear layer expects an AdapterPair, got {type(adapter).__name__}")
        d, r = adapter.b.shape
        if d != self.out_features or adapter.a.shape[1] != self.in_features:
            raise AdapterError(
                f"adapter ({d} x {adapter.a.shape[1]}) does not fit linear "
                f"({self.out_features} x {self.in_features})"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.linear(x, self.weight, self.bias)
        if self.adapter is not None:
            out = out + self.adapter.delta(x)
        return out


class AdaptedConv2d(nn.Conv2d, _AdapterHost):
    """nn.Conv2d with an optional Kronecker-form adapter on its kernel."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, padding: int = 0, bias: bool = True):
        super().__init__(in_channels, out_channels, kernel_size, padding=padding, bias=bias)
        self._init_slot()

    def _check_adapter(self, adapter: nn.Module) -> None:
        if not isinstance(adapter, KroneckerConvAdapter):
            raise AdapterError(f"conv layer expects a KroneckerConvAdapter, got {type(adapter).__name__}")
        if (
            adapter.u.shape[0] != self.out_channels
            or adapter.v.shape[1] != self.in_channels
            or adapter.b_spatial.shape[0] != self.kernel_size[0]
            or adapter.padding != self.padding[0]
        ):
            raise AdapterError("conv adapter geometry does not match the base convolution")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self._conv_forward(x, self.weight, self.bias)
        if self.adapter is not None:
            out = out + self.adapter.delta(x)
        return out


class AdapterSlot(nn.Module, _AdapterHost):
    """Bare adapter host: contributes adapter.delta(x) of whatever it is fed."""

    def __init__(self):
        super().__init__()
        self._init_slot()

    def _check_adapter(self, adapter: nn.Module) -> None:
        if not isinstance(adapter, (AdapterPair, KroneckerConvAdapter)):
            raise AdapterError(f"slot expects an adapter module, got {type(adapter).__name__}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.adapter is None:
            raise AdapterError("adapter slot evaluated without an attached adapter")
        return self.adapter.delta(x)


def _escape(path: str) -> str:
    return path.replace(".", "/")


def _unescape(key: str) -> str:
    return key.replace("/", ".")


class AdapterSet(nn.Module):
    """All adapters for one channel kind, keyed by model layer path."""

    def __init__(self, channel_kind: str, specs: dict[str, AdapterSpec], base_fingerprint: str = ""):
        super().__init__()
        self.channel_kind = channel_kind
        self.specs = dict(specs)
        self.base_fingerprint = base_fingerprint
        self.adapters = nn.ModuleDict()

    def add(self, path: str, adapter: nn.Module) -> None:
        key = _escape(path)
        if key in self.adapters:
            raise AdapterError(f"layer {path!r} already has an adapter in this set")
        self.adapters[key] = adapter

    def items(self):
        for key, adapter in self.adapters.items():
            yield _unescape(key), adapter

    def paths(self) -> list[str]:
        return [_unescape(k) for k in self.adapters.keys()]

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def count_by_role(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for _, adapter in self.items():
            counts[adapter.role] = counts.get(adapter.role, 0) + adapter.param_count
        return counts


def attach(model: nn.Module, adapter_set: AdapterSet) -> None:
    """Point every host layer named in the set at its adapter."""
    for path, adapter in adapter_set.items():
        host = model.get_submodule(path)
        if not isinstance(host, _AdapterHost):
            raise AdapterError(f"layer {path!r} is not adaptable ({type(host).__name__})")
        host.set_adapter(adapter)


def detach_all(model: nn.Module) -> None:
    for module in model.modules():
        if isinstance(module, _AdapterHost):
            module.set_adapter(None)


@contextmanager
def attached(model: nn.Module, adapter_set: AdapterSet | None):
    """Scoped attachment; restores a bare model on exit."""
    if adapter_set is not None:
        attach(model, adapter_set)
    try:
        yield model
    finally:
        if adapter_set is not None:
            detach_all(model)


def iter_adapter_hosts(model: nn.Module):
    for name, module in model.named_modules():
        if isinstance(module, _AdapterHost):
            yield name, module


def base_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    """State dict of the frozen backbone, excluding any attached adapters."""
    return {k: v for k, v in model.state_dict().items() if ".adapter." not in k and not k.startswith("adapter.")}


def model_fingerprint(model: nn.Module) -> str:
    """Stable digest of the base weights, for adapter compatibility checks."""
    digest = hashlib.sha256()
    for name, tensor in sorted(base_state_dict(model).items()):
        digest.update(name.encode())
        buf = io.BytesIO()
        torch.save(tensor.detach().cpu(), buf)
        digest.update(buf.getvalue())
    return digest.hexdigest()[:16]


def attach_attention_adapters(
    block, spec: AdapterSpec, rng: torch.Generator, base_path: str = ""
) -> dict[str, nn.Module]:
    """Adapt one windowed-attention block: qkv at doubled rank, output
    projection at base rank, relative position bias left frozen."""
    attn = block.attn
    created: dict[str, nn.Module] = {}
    qkv_spec = spec.with_rank(2 * spec.rank)
    for name in ("q", "k", "v"):
        layer: AdaptedLinear = getattr(attn, name)
        adapter = AdapterPair(layer.out_features, layer.in_features, qkv_spec, rng)
        layer.set_adapter(adapter)
        created[f"{base_path}attn.{name}"] = adapter
    out_adapter = AdapterPair(attn.out.out_features, attn.out.in_features, spec, rng)
    attn.out.set_adapter(out_adapter)
    created[f"{base_path}attn.out"] = out_adapter
    return created


def attach_scorenet_adapters(net, spec: AdapterSpec, rng: torch.Generator, base_path: str = "") -> dict[str, nn.Module]:
    """Adapt every denoiser residual block: Kronecker adapters on both conv
    paths plus a dense adapter on the time-embedding projection."""
    created: dict[str, nn.Module] = {}
    for idx, block in enumerate(net.blocks):
        prefix = f"{base_path}blocks.{idx}."
        conv1: AdaptedConv2d = block.conv1
        a1 = KroneckerConvAdapter(
            conv1.out_channels, conv1.in_channels, conv1.kernel_size[0], spec, rng, padding=conv1.padding[0]
        )
        conv1.set_adapter(a1)
        created[prefix + "conv1"] = a1

        conv2: AdaptedConv2d = block.conv2
        a2 = KroneckerConvAdapter(
            conv2.out_channels, conv2.in_channels, conv2.kernel_size[0], spec, rng, padding=conv2.padding[0]
        )
        block.spatial2.set_adapter(a2)
        created[prefix + "spatial2"] = a2

        tproj: AdaptedLinear = block.time_proj
        at = AdapterPair(tproj.out_features, tproj.in_features, spec, rng)
        tproj.set_adapter(at)
        created[prefix + "time_proj"] = at
    return created


def attach_classifier_adapter(classifier, spec: AdapterSpec, rng: torch.Generator, base_path: str = "") -> dict[str, nn.Module]:
    """Single adapter on the final logit projection."""
    head: AdaptedLinear = classifier.head
    adapter = AdapterPair(head.out_features, head.in_features, spec, rng)
    head.set_adapter(adapter)
    return {f"{base_path}head": adapter}


@dataclass
class ParamReportRow:
    role: str
    original: int
    adapter: int

    @property
    def percent(self) -> float:
        return 100.0 * self.adapter / self.original if self.original else 0.0


@dataclass
class ParamReport:
    rows: list[ParamReportRow]

    @property
    def original_total(self) -> int:
        return sum(r.original for r in self.rows)

    @property
    def adapter_total(self) -> int:
        return sum(r.adapter for r in self.rows)

    @property
    def percent_total(self) -> float:
        return 100.0 * self.adapter_total / self.original_total

    @property
    def reduction_factor(self) -> float:
        return self.original_total / self.adapter_total

    def render(self) -> str:
        lines = [f"{'component':<12} {'original':>12} {'adapter':>12} {'% of orig':>10}"]
        for r in self.rows:
            lines.append(f"{r.role:<12} {r.original:>12,} {r.adapter:>12,} {r.percent:>9.2f}%")
        lines.append(
            f"{'total':<12} {self.original_total:>12,} {self.adapter_total:>12,} {self.percent_total:>9.2f}%"
        )
        lines.append(f"reduction factor: {self.reduction_factor:.2f}x")
        return "\n".join(lines)


def param_report_from_counts(original: dict[str, int], adapter: dict[str, int]) -> ParamReport:
    """Accounting table from raw per-role parameter counts."""
    rows = [ParamReportRow(role, original[role], adapter.get(role, 0)) for role in original]
    return ParamReport(rows)


def param_report(model, adapter_set: AdapterSet) -> ParamReport:
    """Accounting for a live model: base parameters per role vs adapter parameters."""
    role_modules = {
        "encoder": model.encoder,
        "decoder": model.decoder,
        "denoiser": getattr(model, "scorenet", None),
        "classifier": model.classifier,
    }
    with torch.no_grad():
        original = {}
        for role, module in role_modules.items():
            if module is None:
                continue
            names = {k for k, _ in module.named_parameters() if ".adapter." not in k}
            original[role] = sum(p.numel() for k, p in module.named_parameters() if k in names)
    return param_report_from_counts(original, adapter_set.count_by_role())


def save_adapters(adapter_set: AdapterSet, path) -> None:
    """One self-describing file per channel kind."""
    layers = {}
    for layer_path, adapter in adapter_set.items():
        if isinstance(adapter, AdapterPair):
            entry = {
                "type": "dense",
                "role": adapter.role,
                "rank": adapter.rank,
                "scale": adapter.scale,
                "a": adapter.a.detach().cpu(),
                "b": adapter.b.detach().cpu(),
            }
        else:
            entry = {
                "type": "kron_conv",
                "role": adapter.role,
                "rank": adapter.rank,
                "scale": adapter.scale,
                "padding": adapter.padding,
                "b_spatial": adapter.b_spatial.detach().cpu(),
                "u": adapter.u.detach().cpu(),
                "v": adapter.v.detach().cpu(),
            }
        layers[layer_path] = entry
    payload = {
        "format_version": ADAPTER_FORMAT_VERSION,
        "channel_kind": adapter_set.channel_kind,
        "specs": {role: (s.rank, s.alpha_hat) for role, s in adapter_set.specs.items()},
        "base_fingerprint": adapter_set.base_fingerprint,
        "layers": layers,
    }
    torch.save(payload, path)


def load_adapters(path, expected_fingerprint: str | None = None) -> AdapterSet:
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:
        raise AdapterFormatError(f"cannot parse adapter file {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise AdapterFormatError(f"{path} is not an adapter file")
    if payload["format_version"] != ADAPTER_FORMAT_VERSION:
        raise AdapterFormatError(
            f"unsupported adapter format version {payload['format_version']} in {path}"
        )
    if expected_fingerprint is not None and payload["base_fingerprint"] != expected_fingerprint:
        raise AdapterCompatibilityError(
            f"adapter file {path} was trained against base model "
            f"{payload['base_fingerprint']}, but the current base is {expected_fingerprint}"
        )
    specs = {role: AdapterSpec(role, rank, alpha_hat) for role, (rank, alpha_hat) in payload["specs"].items()}
    adapter_set = AdapterSet(payload["channel_kind"], specs, payload["base_fingerprint"])
    rng = torch.Generator()  # values are overwritten right after construction
    for layer_path, entry in payload["layers"].items():
        spec = AdapterSpec(entry["role"], entry["rank"], entry["scale"] * entry["rank"])
        if entry["type"] == "dense":
            adapter = AdapterPair(entry["b"].shape[0], entry["a"].shape[1], spec, rng)
            with torch.no_grad():
                adapter.a.copy_(entry["a"])
                adapter.b.copy_(entry["b"])
        elif entry["type"] == "kron_conv":
            adapter = KroneckerConvAdapter(
                entry["u"].shape[0],
                entry["v"].shape[1],
                entry["b_spatial"].shape[0],
                spec,
                rng,
                padding=entry["padding"],
            )
            with torch.no_grad():
                adapter.b_spatial.copy_(entry["b_spatial"])
                adapter.u.copy_(entry["u"])
                adapter.v.copy_(entry["v"])
        else:
            raise AdapterFormatError(f"unknown adapter entry type {entry['type']!r} in {path}")
        adapter_set.add(layer_path, adapter)
    return adapter_set

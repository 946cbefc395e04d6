"""Fixed-seed verification suites shared by the ``verify`` command and the test-suite.

Each suite returns a :class:`SuiteResult` with the worst observed error and the
tolerance it was held to.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import VMamba, preset
from .cross_scan import cross_merge, cross_scan_expand, scan_orders, ss2d
from .data import DatasetIndex, Record, normalized_entropy, stratified_split
from .nn import Module
from .ssm import (
    DiscretizedStep,
    SsmLearned,
    discretize,
    exact_zoh_input,
    s6,
    selective_scan_fast,
    selective_scan_ref,
)
from .training import label_smoothed_ce, top_k_accuracy
from .vss import VssBlock

SCAN_TOL = 1e-5
GRAD_TOL = 1e-3
ORDER_TARGET, ORDER_TOL = 4.0, 0.10
ENTROPY_TOL = 1e-6


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<22} max_err={self.max_error:.3e}  tol={self.tolerance:.1e}  {self.seconds:6.2f}s  {self.detail}"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def max_rel_dev(fast: np.ndarray, ref: np.ndarray) -> float:
    """Largest absolute deviation relative to the largest reference magnitude."""
    scale = float(np.abs(ref).max())
    return float(np.abs(fast - ref).max()) / max(scale, np.finfo(np.float64).tiny)


def random_scan_instance(rng: np.random.Generator, batch=2, L=64, D=8, N=4, dtype=np.float32):
    """A discretized step from random but physically valid parameters (A<0, Delta>0)."""
    Delta = rng.uniform(1e-3, 0.5, (batch, L, D))
    A = -np.exp(rng.normal(0.0, 0.5, (D, N)))
    B = rng.normal(size=(batch, L, N))
    C = rng.normal(size=(batch, L, N))
    x = rng.normal(size=(batch, L, D))
    Dsk = rng.normal(size=D)
    t = lambda a: Tensor(np.asarray(a, dtype=dtype))  # noqa: E731
    step = discretize(t(Delta), t(A), t(B), t(x))
    return step, t(C), t(Dsk), t(x)


# ----------------------------------------------------------------- suites
@_timed
def scan_oracle_suite(instances: int = 100, chunks=(1, 2, 7, 16, 64), seed: int = 0, scan: Callable | None = None) -> SuiteResult:
    """Chunked scan against the sequential reference, 32-bit."""
    scan = scan or selective_scan_fast
    rng = np.random.default_rng(seed)
    worst = 0.0
    with ad.no_grad():
        for _ in range(instances):
            step, C, Dsk, x = random_scan_instance(rng)
            ref = selective_scan_ref(step, C, Dsk, x).data
            for ch in chunks:
                worst = max(worst, max_rel_dev(scan(step, C, Dsk, x, chunk=ch).data, ref))
    return SuiteResult("scan_oracle", worst < SCAN_TOL, worst, SCAN_TOL, detail=f"{instances} instances x chunks {list(chunks)}")


def randomize(module: Module, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Perturb every parameter to O(1) scale so no gradient sits below finite-difference noise."""
    for p in module.parameters():
        p.data = p.data + rng.normal(0.0, scale, p.shape).astype(p.dtype)


def check_leaves(f: Callable[[], Tensor], leaves: dict, eps: float = 1e-5, max_coords: int | None = None, rng=None) -> dict:
    """Run :func:`grad_check` for each named leaf; optionally sample ``max_coords`` coordinates per leaf."""
    out = {}
    for name, t in leaves.items():
        idx = None
        if max_coords is not None and t.size > max_coords:
            idx = sorted((rng or np.random.default_rng(0)).choice(t.size, max_coords, replace=False))
        out[name] = ad.grad_check(lambda _x: f(), t, eps=eps, indices=idx)
    return out


def _weighted_sum(y: Tensor, rng) -> Tensor:
    # random projection keeps every output coordinate in play
    return (y * Tensor(rng.normal(size=y.shape))).sum()


def op_gradients(rng: np.random.Generator) -> dict:
    """Gradient errors for every primitive op at small random shapes (64-bit)."""
    errs = {}
    t = lambda *s: Tensor(rng.normal(size=s))  # noqa: E731
    pos = lambda *s: Tensor(rng.uniform(0.5, 2.0, size=s))  # noqa: E731

    def chk(name, f, *xs):
        errs[name] = max(ad.grad_check(lambda _x: _weighted_sum(f(), np.random.default_rng(7)), x) for x in xs)

    a, b = t(2, 3), t(3)
    chk("add_broadcast", lambda: a + b, a, b)
    a, b = t(2, 1), t(1, 3)
    chk("sub_broadcast", lambda: a - b, a, b)
    chk("mul_broadcast", lambda: a * b, a, b)
    a, b = t(2, 3), pos(2, 3)
    chk("div", lambda: a / b, a, b)
    for kind in ("exp", "neg", "silu", "softplus", "sigmoid"):
        x = t(3, 4)
        chk(kind, lambda: ad.ew_unary(kind, x), x)
    for kind in ("log", "sqrt"):
        x = pos(3, 4)
        chk(kind, lambda: ad.ew_unary(kind, x), x)
    a, b = t(2, 3, 4), t(4, 5)
    chk("matmul_shared", lambda: ad.matmul(a, b), a, b)
    a, b = t(2, 1, 3, 4), t(3, 4, 2)
    chk("matmul_batched", lambda: ad.matmul(a, b), a, b)
    x, g, be = t(2, 3, 5), t(5), t(5)
    chk("layer_norm", lambda: ad.layer_norm(x, g, be), x, g, be)
    x, k, bias = t(2, 3, 5, 4), t(3, 1, 3, 3), t(3)
    chk("depthwise_conv2d", lambda: ad.depthwise_conv2d(x, k, 1, bias), x, k, bias)
    x = t(2, 3, 4, 6)
    chk("avg_pool2d", lambda: ad.avg_pool2d(x, 2), x)
    x = t(3, 5)
    chk("log_softmax", lambda: ad.log_softmax(x), x)
    x = t(3, 5)
    chk("label_smoothed_ce", lambda: label_smoothed_ce(x, [0, 4, 2], 0.1), x)
    x = t(2, 3, 4)
    chk("reshape_transpose", lambda: x.reshape(2, 12).transpose(), x)
    chk("sum_mean", lambda: x.sum(axis=1) + x.mean(axis=(0, 1)), x)
    chk("getitem_split", lambda: ad.split(x, [1, 3], axis=2)[1] * x[:, 1:2, :1], x)
    xs = [t(2, 3), t(2, 3)]
    chk("concat_stack", lambda: ad.concat(xs, 1).reshape(2, 2, 3) * ad.stack(xs, 1), *xs)
    return errs


def scan_gradients(rng: np.random.Generator) -> dict:
    errs = {}
    step, C, Dsk, x = random_scan_instance(rng, batch=2, L=9, D=3, N=2, dtype=np.float64)
    for name, fn in (("scan_ref", selective_scan_ref), ("scan_fast", lambda *a: selective_scan_fast(*a, chunk=4))):
        leaves = {"A_bar": step.A_bar, "B_bar_x": step.B_bar_x, "C": C, "D": Dsk, "x": x}
        for k, v in leaves.items():
            v._node = None  # detach from the discretization tape
        res = check_leaves(lambda: _weighted_sum(fn(step, C, Dsk, x), np.random.default_rng(3)), leaves)
        errs[name] = max(res.values())
    ssm = SsmLearned(3, 2, rng)
    randomize(ssm, rng)
    xin = Tensor(rng.normal(size=(2, 6, 3)))
    leaves = dict(ssm.named_parameters(), x=xin)
    errs["s6"] = max(check_leaves(lambda: _weighted_sum(s6(xin, ssm, chunk=4), np.random.default_rng(4)), leaves).values())
    return errs


def block_gradients(rng: np.random.Generator) -> dict:
    errs = {}
    learned = [SsmLearned(3, 2, rng) for _ in range(4)]
    for m in learned:
        randomize(m, rng)
    x = Tensor(rng.normal(size=(1, 3, 3, 3)))
    leaves = {f"dir{i}.{k}": v for i, m in enumerate(learned) for k, v in m.named_parameters().items()}
    leaves["x"] = x
    errs["ss2d"] = max(check_leaves(lambda: _weighted_sum(ss2d(x, learned), np.random.default_rng(5)), leaves).values())

    block = VssBlock(4, rng, d_state=2, expansion=1)
    randomize(block, rng)
    x = Tensor(rng.normal(size=(1, 4, 3, 3)))
    leaves = dict(block.named_parameters(), x=x)
    errs["vss_block"] = max(check_leaves(lambda: _weighted_sum(block(x), np.random.default_rng(6)), leaves).values())
    return errs


def model_gradients(rng: np.random.Generator, max_coords: int | None = 64) -> dict:
    """Full Nano-micro model (dims 4/8/16/32, depths 1/1/1/1, N=2) with the global residual, 32x32 input."""
    model = VMamba(preset("micro", num_classes=5, variant="global_residual"), seed=int(rng.integers(1 << 31)))
    randomize(model, rng, scale=0.3)
    img = Tensor(rng.normal(size=(2, 3, 32, 32)))
    labels = [1, 3]
    leaves = dict(model.named_parameters())
    res = check_leaves(lambda: label_smoothed_ce(model(img), labels, 0.1), leaves, max_coords=max_coords, rng=rng)
    return {"model_micro": max(res.values())}


@_timed
def gradient_suite(seed: int = 0, include_model: bool = True, max_coords: int | None = 64) -> SuiteResult:
    """Autodiff against central differences for every op, the scans, SS2D, a VSS block and the micro model."""
    rng = np.random.default_rng(seed)
    with ad.precision("float64"):
        errs = op_gradients(rng)
        errs.update(scan_gradients(rng))
        errs.update(block_gradients(rng))
        if include_model:
            errs.update(model_gradients(rng, max_coords))
    worst_name = max(errs, key=errs.get)
    worst = errs[worst_name]
    return SuiteResult("gradients_64bit", worst < GRAD_TOL, worst, GRAD_TOL, detail=f"{len(errs)} checks, worst {worst_name}")


def taylor_error_ratios(deltas=(0.2, 0.1, 0.05, 0.025)) -> list[float]:
    """Ratio of first-order vs exact-ZOH input-matrix error between consecutive halvings of Delta (A=-1, B=1)."""
    errs = []
    with ad.precision("float64"):
        for d in deltas:
            step = discretize(Tensor([[d]]), Tensor([[-1.0]]), Tensor([[1.0]]), Tensor([[1.0]]))
            taylor = float(step.B_bar_x.data.reshape(-1)[0])
            exact = float(exact_zoh_input(np.float64(d), -1.0, 1.0))
            errs.append(abs(taylor - exact))
    return [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]


@_timed
def discretization_suite() -> SuiteResult:
    ratios = taylor_error_ratios()
    worst = max(abs(r - ORDER_TARGET) / ORDER_TARGET for r in ratios)
    return SuiteResult("discretization_order", worst <= ORDER_TOL, worst, ORDER_TOL, detail="ratios " + ", ".join(f"{r:.3f}" for r in ratios))


@_timed
def cross_scan_suite(seed: int = 0, max_side: int = 16) -> SuiteResult:
    """Bitwise round trip through the four traversal orders, and expand+merge == 4x."""
    rng = np.random.default_rng(seed)
    failures = []
    worst = 0.0
    for H in range(1, max_side + 1):
        for W in (1, 2, 3, max(1, H // 2), H, max_side):
            x = Tensor(rng.normal(size=(2, 3, H, W)).astype(np.float32))
            seqs = cross_scan_expand(x).data
            _, inv = scan_orders(H, W)
            flat = x.data.transpose(0, 2, 3, 1).reshape(2, H * W, 3)
            for k in range(4):
                if not np.array_equal(seqs[:, k][:, inv[k]], flat):
                    failures.append(f"roundtrip dir{k} {H}x{W}")
            merged = cross_merge(Tensor(seqs), H, W).data
            if not np.array_equal(merged, 4 * x.data):
                failures.append(f"merge {H}x{W}")
                worst = max(worst, float(np.abs(merged - 4 * x.data).max()))
    return SuiteResult("cross_scan_roundtrip", not failures, worst, 0.0, detail="; ".join(failures[:3]) or "bitwise")


@_timed
def residual_equivalence_suite(seed: int = 0) -> SuiteResult:
    """Zero-initialized global residual is an exact no-op; parameter delta is C1*C4 + C4."""
    problems = []
    worst = 0.0
    with ad.precision("float64"):
        cfg = preset("micro", num_classes=7)
        plain = VMamba(cfg, seed=seed)
        res = VMamba(preset("micro", num_classes=7, variant="global_residual"), seed=seed)
        img = Tensor(np.random.default_rng(seed).normal(size=(2, 3, 32, 32)))
        with ad.no_grad():
            a, b = plain(img).data, res(img).data
        worst = float(np.abs(a - b).max())
        if not np.array_equal(a, b):
            problems.append("logits differ")
    C1, C4 = cfg.stage_dims[0], cfg.stage_dims[3]
    delta = res.num_parameters() - plain.num_parameters()
    if delta != C1 * C4 + C4:
        problems.append(f"param delta {delta} != {C1 * C4 + C4}")
    return SuiteResult("residual_equivalence", not problems, worst, 1e-12, detail="; ".join(problems) or f"param delta {delta}")


@_timed
def entropy_suite() -> SuiteResult:
    errs = []
    for n in (2, 3, 7, 101, 241):
        if normalized_entropy([5] * n) != 1.0:
            errs.append(f"balanced n={n}")
    got = normalized_entropy([1, 1, 2])
    dev = abs(got - 0.946395)
    if dev > ENTROPY_TOL:
        errs.append(f"[1,1,2] -> {got}")
    if normalized_entropy([10**6, 1]) >= 0.1:
        errs.append("near-degenerate not below 0.1")
    return SuiteResult("entropy", not errs, dev, ENTROPY_TOL, detail="; ".join(errs))


def top_k_by_sorting(logits: np.ndarray, labels, k: int) -> float:
    """Oracle: fully sort each row by (-logit, class index)."""
    hits = 0
    for row, y in zip(logits, labels):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        hits += int(y in order[:k])
    return hits / len(labels)


@_timed
def topk_suite(seed: int = 0, rows: int = 1000, classes: int = 10) -> SuiteResult:
    rng = np.random.default_rng(seed)
    # coarse values force ties
    logits = rng.integers(-3, 4, size=(rows, classes)).astype(np.float64)
    labels = rng.integers(0, classes, size=rows)
    errs = []
    prev = -1.0
    for k in range(1, classes + 1):
        got = top_k_accuracy(logits, labels, k)
        if got != top_k_by_sorting(logits, labels, k):
            errs.append(f"k={k} mismatch")
        if got < prev:
            errs.append(f"not monotone at k={k}")
        prev = got
    return SuiteResult("top_k", not errs, float(len(errs)), 0.0, detail="; ".join(errs))


@_timed
def split_suite(seed: int = 0) -> SuiteResult:
    sizes = [10, 9, 7, 64, 33, 2]
    recs = [Record(f"c{c}/img{i:03d}.png", c) for c, n in enumerate(sizes) for i in range(n)]
    idx = DatasetIndex(root=None, class_names=[f"c{c}" for c in range(len(sizes))], records=recs)
    a = stratified_split(idx, 0.7, seed)
    b = stratified_split(idx, 0.7, seed)
    errs = []
    if a.split_lines() != b.split_lines():
        errs.append("same seed gave different split lists")
    worst = 0.0
    for c, n in enumerate(sizes):
        tr = sum(1 for r in a.records if r.label == c and r.split == "train")
        worst = max(worst, abs(tr - 0.7 * n))
    if worst > 1.0:
        errs.append("per-class ratio off by more than one image")
    if sorted(r.path for r in a.records) != sorted(r.path for r in recs):
        errs.append("split is not a partition")
    return SuiteResult("split_protocol", not errs, worst, 1.0, detail="; ".join(errs))


def run_all(quick: bool = False, seed: int = 0) -> list[SuiteResult]:
    """Every suite at fixed seeds; ``quick`` trims instance counts and skips the full-model gradient."""
    return [
        scan_oracle_suite(instances=10 if quick else 100, seed=seed),
        gradient_suite(seed=seed, include_model=not quick),
        discretization_suite(),
        cross_scan_suite(seed=seed, max_side=8 if quick else 16),
        residual_equivalence_suite(seed=seed),
        entropy_suite(),
        topk_suite(seed=seed),
        split_suite(seed=seed),
    ]

"""Self-check suite: one function per acceptance property, shared training runs cached.

Each check returns a :class:`CheckResult`; :func:`run_all` prints one PASS/FAIL
line per check.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from . import oracles
from .backbone import DualBranchMAE, preset, architecture_dimensions
from .config import load_config
from .datakit import decode_clip, derive_seed, encode_clip, generate_synthetic_clip
from .evalkit import embed_clips, linear_probe, rank_gallery, retrieve, split_indices
from .masking import sample_mask
from .objectives import cross_loss, intra_loss, mean_views, mse_loss, nt_xent, reconstruction_loss, total_loss
from .tokenizer import PatchConfig, PatchProjection, patchify, tokenize_frame, tokenize_video, unpatchify
from .trainer import Trainer, build_model, compute_losses, evaluate_loss, moving_average, synthetic_data, tta_adapt

SMOKE_STEPS = 200
PROBE_STEPS = 1500
PROBE_SEEDS = (0, 1, 2)
PROBE_PER_CLASS = 128
TTA_SEEDS = tuple(range(5))
TTA_EVAL_DRAWS = 16


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} criterion {self.number:>2} {self.name}: {self.detail} [{self.seconds:.1f}s]"


class Context:
    """Caches pretraining runs shared between checks."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._runs: dict[tuple[int, int], tuple[Trainer, float]] = {}

    def config(self, seed: int, steps: int, **extra: Any) -> dict[str, Any]:
        return load_config(overrides={"seed": seed, "train.steps": steps, **extra})

    def pretrained(self, seed: int, steps: int) -> tuple[Trainer, float]:
        key = (seed, steps)
        if key not in self._runs:
            start = time.perf_counter()
            trainer = Trainer(self.config(seed, steps))
            trainer.run()
            self._runs[key] = (trainer, time.perf_counter() - start)
        return self._runs[key]


def _f64(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


# --------------------------------------------------------------------------
# 1  token arithmetic
# --------------------------------------------------------------------------


def check_token_counts(ctx: Context) -> CheckResult:
    cfg = PatchConfig(2, 16, 16, 768)
    clip = torch.zeros(3, 16, 224, 224)
    video = tokenize_video(clip, cfg, PatchProjection(cfg, 3))
    frame = tokenize_frame(clip[:, 0], cfg, PatchProjection(cfg, 3, frame=True))
    ok = video.tokens.shape == (1568, 768) and frame.tokens.shape == (196, 768)
    return CheckResult(1, "token arithmetic", ok, f"video {video.n} tokens, frame {frame.n} tokens")


# --------------------------------------------------------------------------
# 2  oracle equivalence
# --------------------------------------------------------------------------


def check_oracles(ctx: Context, instances: int = 50) -> CheckResult:
    rng = np.random.default_rng(derive_seed(ctx.seed, 2))
    worst = 0.0
    for _ in range(instances):
        B, D = int(rng.integers(1, 9)), int(rng.integers(2, 17))
        tau = float(rng.uniform(0.05, 1.0))
        a, b, c, d = (rng.normal(size=(B, D)) for _ in range(4))
        # L_u and L_f share the per-sample form; C_u and C_f take the view means against h
        got_u = nt_xent(_f64(a), _f64(b), tau).numpy()
        want_u = oracles.nt_xent(a.tolist(), b.tolist(), tau)
        got_f = nt_xent(_f64(c), _f64(d), tau).numpy()
        want_f = oracles.nt_xent(c.tolist(), d.tolist(), tau)
        zm = mean_views(_f64(a), _f64(b))
        got_cu = cross_loss(zm, _f64(c), zm, _f64(c), tau).item()
        want_cu = oracles.cross(oracles.mean_views(a.tolist(), b.tolist()), c.tolist(), oracles.mean_views(a.tolist(), b.tolist()), c.tolist(), tau)
        got_cf = cross_loss(_f64(c), _f64(d), _f64(a), _f64(b), tau).item()
        want_cf = oracles.cross(c.tolist(), d.tolist(), a.tolist(), b.tolist(), tau)
        errs = [_rel(x, y) for x, y in zip(got_u, want_u)] + [_rel(x, y) for x, y in zip(got_f, want_f)]
        errs += [_rel(got_cu, want_cu), _rel(got_cf, want_cf)]
        worst = max(worst, *errs)
    eye = [[1.0, 0.0], [0.0, 1.0]]
    target = math.log(2 + math.e) - 1
    ortho = nt_xent(_f64(eye), _f64(eye), 1.0).numpy()
    ortho_err = max(abs(v - target) for v in ortho)
    ok = worst <= 1e-6 and ortho_err <= 1e-9
    return CheckResult(2, "oracle equivalence", ok, f"{instances} instances, worst rel err {worst:.2e}; orthogonal case err {ortho_err:.1e}")


# --------------------------------------------------------------------------
# 3  gradients
# --------------------------------------------------------------------------


def _unit_directions(shapes, gen: torch.Generator, dtype: torch.dtype) -> list[torch.Tensor]:
    """Random direction with unit norm over all tensors jointly, so ``h`` is the true step length."""
    dirs = [torch.randn(shape, generator=gen, dtype=dtype) for shape in shapes]
    norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
    return [d / norm for d in dirs]


def central_difference_error(fn: Callable[..., torch.Tensor], inputs: list[torch.Tensor], h: float = 1e-4, probes: int = 8, seed: int = 0) -> float:
    """Worst relative error between autograd and central differences along random directions."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    grads = torch.autograd.grad(fn(*inputs), inputs)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(probes):
            dirs = _unit_directions([x.shape for x in inputs], gen, inputs[0].dtype)
            plus = fn(*[x + h * d for x, d in zip(inputs, dirs)]).item()
            minus = fn(*[x - h * d for x, d in zip(inputs, dirs)]).item()
            numeric = (plus - minus) / (2 * h)
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
    return worst


def model_gradient_error(model: DualBranchMAE, clips: np.ndarray, cfg: dict[str, Any], seed: int, h: float = 1e-4, probes: int = 4) -> float:
    """Central differences of the full weighted objective along random directions in parameter space."""
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    compute_losses(model, clips, cfg, seed).losses.tensor.backward()
    grads = [p.grad.detach().clone() for p in params]
    gen = torch.Generator().manual_seed(seed % 2**63)
    worst = 0.0
    with torch.no_grad():
        for _ in range(probes):
            dirs = _unit_directions([p.shape for p in params], gen, params[0].dtype)
            values = []
            for sign in (1.0, -1.0):
                for p, d in zip(params, dirs):
                    p.add_(sign * h * d)
                values.append(compute_losses(model, clips, cfg, seed).losses.total)
                for p, d in zip(params, dirs):
                    p.sub_(sign * h * d)
            numeric = (values[0] - values[1]) / (2 * h)
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
    return worst


def check_gradients(ctx: Context, instances: int = 10) -> CheckResult:
    rng = np.random.default_rng(derive_seed(ctx.seed, 3))
    worst: dict[str, float] = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    cfg = load_config(overrides={"seed": ctx.seed, "data.frames": 4, "data.height": 16, "data.width": 16})
    for k in range(instances):
        B, D, tau = 4, 8, float(rng.uniform(0.1, 1.0))
        zs = [_f64(rng.normal(size=(B, D))) for _ in range(4)]
        record("intra", central_difference_error(lambda a, b, c, d: intra_loss(a, b, c, d, tau), zs, seed=k))
        record("cross", central_difference_error(lambda a, b, c, d: cross_loss(mean_views(a, b), c, mean_views(a, b), d, tau), zs, seed=k))
        w = _f64(rng.normal(size=(6, 5)))
        fd = [_f64(rng.normal(size=(2, 3, 6))) for _ in range(2)]
        record("mse", central_difference_error(lambda a, b, m: mse_loss(a, b, lambda x: torch.tanh(x @ m)), fd + [w], seed=k))
        us = [_f64(rng.normal(size=(2, 3, 5))) for _ in range(4)]
        record("reconstruction", central_difference_error(lambda *u: reconstruction_loss(*u), us, seed=k))

        torch.manual_seed(derive_seed(ctx.seed, 3, k))
        model = DualBranchMAE(preset("toy", frames=4, height=16, width=16)).double()
        clips = np.stack([generate_synthetic_clip((3, 4, 16, 16), c % 4, derive_seed(ctx.seed, k, c)) for c in range(2)])
        record("total", model_gradient_error(model, clips, cfg, derive_seed(ctx.seed, 3, k)))
    ok = all(v <= 1e-4 for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return CheckResult(3, "gradient correctness", ok, f"{instances} instances each; worst rel err {detail}")


# --------------------------------------------------------------------------
# 4  invariances
# --------------------------------------------------------------------------


def _orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def check_invariances(ctx: Context, instances: int = 20) -> CheckResult:
    rng = np.random.default_rng(derive_seed(ctx.seed, 4))
    worst = 0.0
    for _ in range(instances):
        B, D, tau = int(rng.integers(2, 9)), int(rng.integers(2, 17)), float(rng.uniform(0.05, 1.0))
        zs = [rng.normal(size=(B, D)) for _ in range(4)]
        scaled = [z * rng.uniform(0.01, 100.0, size=(B, 1)) for z in zs]
        q = _orthogonal(D, rng)
        rotated = [z @ q for z in zs]

        def losses(z):
            a, b, c, d = map(_f64, z)
            # cross terms see the already-averaged video vectors, so those are what gets scaled
            return np.array([intra_loss(a, b, c, d, tau).item(), cross_loss(a, b, c, d, tau).item()])

        base = losses(zs)
        worst = max(worst, float(np.abs(losses(scaled) - base).max()), float(np.abs(losses(rotated) - base).max()))

    one = [_f64(rng.normal(size=(1, 5))) for _ in range(4)]
    single = [nt_xent(one[0], one[1], 0.1).item(), intra_loss(*one, 0.1).item(), cross_loss(*one, 0.1).item()]

    torch.manual_seed(ctx.seed)
    model = DualBranchMAE(preset("toy")).double()
    clips = synthetic_data(load_config(overrides={"seed": ctx.seed, "data.per_class": 1}))[0]
    r = compute_losses(model, clips, load_config(overrides={"seed": ctx.seed, "loss.lambda_c": 0.7}), ctx.seed).losses
    recomposed = r.lambda_c * (r.l_intra + r.l_cross) + r.l_rl + r.l_mse
    decomposition = max(abs(r.total - recomposed), abs(float(r.tensor.detach()) - r.total))
    ok = worst <= 1e-6 and all(v == 0.0 for v in single) and decomposition <= 1e-12
    detail = f"max change {worst:.1e}; B=1 losses {single}; decomposition err {decomposition:.1e}"
    return CheckResult(4, "invariance suite", ok, detail)


# --------------------------------------------------------------------------
# 5  masking
# --------------------------------------------------------------------------


def mask_violations(grid, ratio: float, strategy: str, seed: int) -> list[str]:
    gt, gh, gw = grid
    n, hw = gt * gh * gw, gh * gw
    m = sample_mask(grid, ratio, strategy, seed)
    masked, visible = np.asarray(m.masked_indices), np.asarray(m.visible_indices)
    problems = []
    if strategy == "random":
        expected = math.floor(ratio * n + 1e-9)
    elif strategy == "tube":
        expected = math.floor(ratio * hw + 0.5) * gt
    else:
        expected = math.floor(ratio * gt + 0.5) * hw
    if len(masked) != expected:
        problems.append(f"count {len(masked)} != {expected}")
    if np.intersect1d(masked, visible).size:
        problems.append("overlap")
    if not np.array_equal(np.union1d(masked, visible), np.arange(n)):
        problems.append("coverage")
    if strategy == "tube":
        cells = set((masked % hw).tolist())
        if set(masked.tolist()) != {t * hw + c for t in range(gt) for c in cells}:
            problems.append("tube structure")
    if strategy == "frame":
        slots = set((masked // hw).tolist())
        if set(masked.tolist()) != {s * hw + c for s in slots for c in range(hw)}:
            problems.append("frame structure")
    return problems


def check_masking(ctx: Context, seeds: int = 1000) -> CheckResult:
    grid = (8, 14, 14)
    failures = 0
    first = ""
    for strategy in ("random", "tube", "frame"):
        for ratio in (0.75, 0.9, 0.95):
            for s in range(seeds):
                problems = mask_violations(grid, ratio, strategy, derive_seed(ctx.seed, s))
                if problems:
                    failures += 1
                    first = first or f"{strategy} rho={ratio} seed={s}: {problems}"
    n_masked = len(sample_mask(grid, 0.9, "random", ctx.seed).masked_indices)
    ok = failures == 0 and n_masked == 1411
    detail = f"{9 * seeds} masks, {failures} violations; rho=0.9 N=1568 -> {n_masked} masked"
    return CheckResult(5, "masking", ok, detail + (f"; {first}" if first else ""))


# --------------------------------------------------------------------------
# 6  learning smoke
# --------------------------------------------------------------------------


def check_learning(ctx: Context) -> CheckResult:
    trainer, seconds = ctx.pretrained(ctx.seed, SMOKE_STEPS)
    ma = moving_average([r.losses.total for r in trainer.history])
    ratio = ma[-1] / ma[4]
    ok = ratio <= 0.7 and seconds <= 300
    return CheckResult(6, "learning smoke", ok, f"moving-average total step {SMOKE_STEPS} / step 5 = {ratio:.3f}; train time {seconds:.0f}s")


# --------------------------------------------------------------------------
# 7  representation quality
# --------------------------------------------------------------------------


def probe_gap(ctx: Context, seed: int) -> tuple[float, float, float]:
    """(pretrained top-1, random-init top-1, shuffled-label top-1) for one seed."""
    trainer, _ = ctx.pretrained(seed, PROBE_STEPS)
    cfg = dict(trainer.cfg)
    cfg["data.per_class"] = PROBE_PER_CLASS
    clips, labels = synthetic_data(cfg, split=1)
    train, test = split_indices(labels, cfg["probe.train_frac"], seed)
    kw = dict(seed=seed, steps=cfg["probe.steps"], lr=cfg["probe.lr"], momentum=cfg["probe.momentum"], weight_decay=cfg["probe.weight_decay"])
    pre = embed_clips(trainer.model, clips)
    rand = embed_clips(build_model(cfg), clips)
    shuffled = np.random.default_rng(derive_seed(seed, 0x5F)).permutation(labels[train])
    return (
        linear_probe(pre[train], labels[train], pre[test], labels[test], **kw).top1,
        linear_probe(rand[train], labels[train], rand[test], labels[test], **kw).top1,
        linear_probe(pre[train], shuffled, pre[test], labels[test], **kw).top1,
    )


def check_representation(ctx: Context) -> CheckResult:
    rows = [probe_gap(ctx, ctx.seed + s) for s in PROBE_SEEDS]
    gaps = [100 * (p - r) for p, r, _ in rows]
    shuffled = float(np.mean([s for _, _, s in rows]))
    median = float(np.median(gaps))
    ok = median >= 10.0 and abs(shuffled - 0.25) <= 0.05
    per_seed = "; ".join(f"{p:.3f} vs {r:.3f}" for p, r, _ in rows)
    return CheckResult(7, "representation quality", ok, f"pretrained vs random top-1 {per_seed}; median gain {median:.1f} points; shuffled-label {shuffled:.3f}")


# --------------------------------------------------------------------------
# 8  test-time adaptation
# --------------------------------------------------------------------------


def check_tta(ctx: Context) -> CheckResult:
    trainer, _ = ctx.pretrained(ctx.seed, SMOKE_STEPS)
    cfg = dict(trainer.cfg)
    held_out = synthetic_data(cfg, split=2)[0]
    improved = 0
    deltas = []
    for s in TTA_SEEDS:
        rng = np.random.default_rng(derive_seed(ctx.seed, 8, s))
        batch = held_out[np.sort(rng.choice(len(held_out), cfg["train.batch_size"], replace=False))]
        # the objective is stochastic in masks and augmentations; score both models on the same fixed draws
        eval_seeds = [derive_seed(ctx.seed, 8, s, 1, j) for j in range(TTA_EVAL_DRAWS)]
        before = float(np.mean([evaluate_loss(trainer.model, batch, cfg, e).total for e in eval_seeds]))
        adapted = tta_adapt(trainer.model, batch, cfg, seed=derive_seed(ctx.seed, 8, s, 2))
        after = float(np.mean([evaluate_loss(adapted, batch, cfg, e).total for e in eval_seeds]))
        deltas.append(after - before)
        improved += after < before

    zero_cfg = dict(cfg, **{"tta.steps": 0})
    untouched = tta_adapt(trainer.model, held_out[:2], zero_cfg)
    identical = all(torch.equal(a, b) for a, b in zip(trainer.model.state_dict().values(), untouched.state_dict().values()))
    ok = improved >= 4 and identical
    detail = f"loss reduced in {improved}/5 seeds (deltas {', '.join(f'{d:+.4f}' for d in deltas)}); tta.steps=0 bit-identical: {identical}"
    return CheckResult(8, "test-time adaptation", ok, detail)


# --------------------------------------------------------------------------
# 9  structure fidelity
# --------------------------------------------------------------------------


def check_structure(ctx: Context) -> CheckResult:
    dims = architecture_dimensions(DualBranchMAE(preset("base"), device="meta"))
    expected = {
        "embed_dim": 768, "frame_embed_dim": 768, "encoder_blocks": 12, "frame_encoder_blocks": 12,
        "encoder_embedding": 384, "projection": 384, "decoder_blocks": 4, "decoder_mlp": 1536,
        "decoder_output": 1536, "video_tokens": 1568, "frame_tokens": 196,
    }
    dims_ok = all(dims[k] == v for k, v in expected.items())

    patch = PatchConfig(2, 16, 16, 768)
    gen = torch.Generator().manual_seed(ctx.seed)
    clip = torch.rand(3, 16, 224, 224, generator=gen)
    round_trip = torch.equal(unpatchify(patchify(clip, patch), (8, 14, 14), patch, 3), clip)

    cfg = load_config(overrides={"seed": ctx.seed, "data.per_class": 16})
    clips, labels = synthetic_data(cfg, split=3)
    emb = embed_clips(build_model(cfg), clips)
    ranking_ok = rank_gallery(emb, emb).tolist() == oracles.ranking(emb.tolist(), emb.tolist())
    ids = list(range(len(emb)))
    result = retrieve(emb, labels, emb, labels, ids, ids)
    brute = oracles.ranking(emb.tolist(), emb.tolist())
    r1 = np.mean([labels[[k for k in row if k != i][0]] == labels[i] for i, row in enumerate(brute)])
    ranking_ok = ranking_ok and result.r1 == r1
    ok = dims_ok and round_trip and ranking_ok
    detail = f"dimensions {'match' if dims_ok else dims}; patch round trip bit-exact: {round_trip}; retrieval on {len(emb)} clips matches oracle: {ranking_ok}"
    return CheckResult(9, "structure fidelity", ok, detail)


# --------------------------------------------------------------------------
# 10  determinism
# --------------------------------------------------------------------------


def check_determinism(ctx: Context) -> CheckResult:
    from .cli import main

    with tempfile.TemporaryDirectory() as tmp:
        logs = []
        for run in ("a", "b"):
            out = Path(tmp) / run
            code = main(["pretrain", "--steps", "5", "--seed", str(ctx.seed), "--out", str(out), "--no-figure"], quiet=True)
            if code != 0:
                return CheckResult(10, "determinism", False, f"pretrain exited with {code}")
            logs.append((out / "loss_log.csv").read_bytes())
    same_log = logs[0] == logs[1]
    clip = generate_synthetic_clip((3, 16, 32, 32), "rotating_bar", ctx.seed)
    clip_ok = decode_clip(encode_clip(clip)).tobytes() == clip.tobytes()
    ok = same_log and clip_ok
    return CheckResult(10, "determinism", ok, f"loss logs byte-identical: {same_log}; clip file round trip bit-exact: {clip_ok}")


CHECKS: dict[int, Callable[[Context], CheckResult]] = {
    1: check_token_counts,
    2: check_oracles,
    3: check_gradients,
    4: check_invariances,
    5: check_masking,
    6: check_learning,
    7: check_representation,
    8: check_tta,
    9: check_structure,
    10: check_determinism,
}


def run_check(number: int, ctx: Context) -> CheckResult:
    start = time.perf_counter()
    try:
        result = CHECKS[number](ctx)
    except Exception as exc:  # a crashing check is a failing check
        result = CheckResult(number, CHECKS[number].__name__, False, f"{type(exc).__name__}: {exc}")
    result.seconds = time.perf_counter() - start
    return result


def run_all(seed: int = 0, only: list[int] | None = None, echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    ctx = Context(seed)
    results = []
    for number in only or sorted(CHECKS):
        result = run_check(number, ctx)
        if echo is not None:
            echo(result.line())
        results.append(result)
    return results


__all__ = ["CHECKS", "CheckResult", "Context", "mask_violations", "run_all", "run_check"]

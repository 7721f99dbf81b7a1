"""Desk-scale quantization-aware training on the crossbar pipeline.

The model is a small CNN whose convolutions run through the tiled/split
pipeline; gradients are computed by explicit reverse-mode passes. Three
straight-through conventions make the quantized graph differentiable:

* quantizer codes pass upstream gradients inside the closed clip interval;
* digit-plane extraction is gradient-transparent across recombination:
  grad(code) = mean over splits of grad(plane_k) / 2^(c*k);
* scale gradients follow the learned-step-size rule (the product rule of the
  graph with rounding residuals detached), scaled by 1/sqrt(N*q_pos).

Parameters and momentum live in float32 (so checkpoints round-trip exactly);
all math runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cim_conv
from .cim_conv import CimLayerConfig, ColumnTable
from .data import Dataset
from .quantizer import (
    QuantSpec,
    ScaleTensor,
    calibrate_scales,
    grad_scale_factor,
    init_scales,
    scale_grad,
)
from .seeding import substream
from .tiler import TilingPlan, col2im, im2col_patches, plan_tiling

__all__ = [
    "TrainSchedule",
    "TrainMode",
    "CimConvLayer",
    "ToyModel",
    "forward_backward",
    "train",
    "evaluate",
]

SCALE_FLOOR = 1e-6  # scales stay strictly positive through SGD updates


class TrainMode:
    ONE_STAGE = "one_stage"
    TWO_STAGE = "two_stage"


@dataclass(frozen=True)
class TrainSchedule:
    """QAT schedule. Two-stage defers partial-sum quantization to stage 2."""

    mode: str = TrainMode.ONE_STAGE
    stage1_epochs: int = 8
    stage2_epochs: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    scale_lr_factor: float = 0.1  # scales move slower than weights
    weight_decay: float = 5e-4  # weights/biases only, never scales
    lr_decay_factor: float = 1.0
    lr_decay_every: int = 0  # 0 disables decay

    def __post_init__(self) -> None:
        if self.mode not in (TrainMode.ONE_STAGE, TrainMode.TWO_STAGE):
            raise ValueError(f"unknown train mode {self.mode!r}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("invalid lr/batch size")

    @property
    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs

    @property
    def psum_quant_enabled_from(self) -> int:
        """First epoch with partial-sum quantization active."""
        return 0 if self.mode == TrainMode.ONE_STAGE else self.stage1_epochs

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


class CimConvLayer:
    """One quantized conv layer: weight, bias, and all scale parameters."""

    def __init__(
        self,
        name: str,
        c_in: int,
        c_out: int,
        kernel: int,
        cfg: CimLayerConfig,
        rng: np.random.Generator,
        quant_enabled: bool = True,
    ):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.cfg = cfg
        self.quant_enabled = quant_enabled
        self.plan: TilingPlan = plan_tiling(c_in, c_out, kernel, cfg.array)
        self.n_split = cfg.n_split
        self.wspec = QuantSpec(cfg.w_bits, signed=True, granularity=cfg.w_gran)
        self.aspec = QuantSpec(cfg.a_bits, signed=False)
        self.pspec = QuantSpec(cfg.p_bits, signed=True, granularity=cfg.p_gran)
        self.w_group_of = cim_conv.weight_group_map(self.plan, cfg.w_gran, self.n_split)
        self.p_group_of = cim_conv.psum_group_map(self.plan, cfg.p_gran, self.n_split)

        fan_in = c_in * kernel * kernel
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
        self.weight = weight.astype(np.float32)
        self.bias = np.zeros(c_out, dtype=np.float32)
        w_dup = np.broadcast_to(weight, (self.n_split,) + weight.shape)
        # saturating calibration: small column groups would waste most of the
        # code range under the mean-based convention
        self.s_w = calibrate_scales(w_dup, self.wspec, self.w_group_of).values.astype(
            np.float32
        )
        self.s_a = np.ones(1, dtype=np.float32)
        self.s_p = np.ones(
            cim_conv.expected_scale_groups(self.plan, cfg.p_gran, self.n_split),
            dtype=np.float32,
        )
        self.s_a_ready = False
        self.s_p_ready = False

    # -- parameter access ------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {
            f"{self.name}.weight": self.weight,
            f"{self.name}.bias": self.bias,
        }
        if self.quant_enabled:
            out[f"{self.name}.s_w"] = self.s_w
            out[f"{self.name}.s_a"] = self.s_a
            out[f"{self.name}.s_p"] = self.s_p
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        attr = name.split(".", 1)[1]
        current = getattr(self, attr)
        if current.shape != value.shape:
            raise ValueError(f"shape mismatch for {name}")
        setattr(self, attr, value.astype(np.float32))

    def scale_tensor_w(self) -> ScaleTensor:
        return ScaleTensor(self.s_w.astype(np.float64), self.w_group_of)

    def scale_tensor_a(self) -> ScaleTensor:
        return ScaleTensor(self.s_a.astype(np.float64), np.zeros((), dtype=np.int64))

    def scale_tensor_p(self) -> ScaleTensor:
        return ScaleTensor(self.s_p.astype(np.float64), self.p_group_of)

    # -- scale calibration hooks ------------------------------------------

    def ensure_act_scale(self, x: np.ndarray) -> None:
        if self.s_a_ready or not self.quant_enabled:
            return
        st = init_scales(x, self.aspec, np.zeros((), dtype=np.int64))
        self.s_a = st.values.astype(np.float32)
        self.s_a_ready = True

    def calibrate_psum_scales(self, x: np.ndarray) -> None:
        """Initialize psum scales from this batch's quantization-off psums."""
        if not self.quant_enabled:
            return
        _, _, cache = cim_conv.forward(
            x,
            self.weight.astype(np.float64),
            self.cfg,
            self.scale_tensor_w(),
            scales_p=None,
            scales_a=self.scale_tensor_a(),
            return_cache=True,
        )
        table: ColumnTable = cache["table"]
        x_cols = np.empty((table.n_columns, cache["psums"].shape[-1]))
        x_cols[table.colid[table.mask]] = cache["psums"][table.mask]
        # saturating calibration: per-column psum distributions are bimodal
        # (background vs feature positions) and a mean-based step clips the
        # informative peaks from the first step
        st = calibrate_scales(x_cols, self.pspec, self.p_group_of)
        self.s_p = st.values.astype(np.float32)
        self.s_p_ready = True

    # -- forward / backward -----------------------------------------------

    def forward(self, x: np.ndarray, psum_active: bool, theta: np.ndarray | None = None):
        """Returns (pre-activation output, cache)."""
        x = np.asarray(x, dtype=np.float64)
        w = self.weight.astype(np.float64)
        if not self.quant_enabled:
            cols = im2col_patches(x, self.kernel, self.cfg.stride, self.cfg.pad)
            wmat = w.reshape(self.c_out, -1)
            y = np.einsum("or,brl->bol", wmat, cols)
            ho = (x.shape[2] + 2 * self.cfg.pad - self.kernel) // self.cfg.stride + 1
            wo = (x.shape[3] + 2 * self.cfg.pad - self.kernel) // self.cfg.stride + 1
            out = y.reshape(x.shape[0], self.c_out, ho, wo)
            out = out + self.bias.astype(np.float64)[None, :, None, None]
            cache = {"plain": True, "x_shape": x.shape, "cols": cols, "w": w}
            return out, cache
        self.ensure_act_scale(x)
        use_psum = psum_active and self.s_p_ready
        out, trace, cache = cim_conv.forward(
            x,
            w,
            self.cfg,
            self.scale_tensor_w(),
            scales_p=self.scale_tensor_p() if use_psum else None,
            scales_a=self.scale_tensor_a(),
            theta=theta,
            return_cache=True,
        )
        out = out + self.bias.astype(np.float64)[None, :, None, None]
        cache["plain"] = False
        cache["trace"] = trace
        return out, cache

    def backward(self, cache: dict, grad_out: np.ndarray) -> tuple[dict, np.ndarray]:
        """Gradients for this layer's parameters plus the input gradient."""
        grads: dict[str, np.ndarray] = {}
        g_bias = grad_out.sum(axis=(0, 2, 3))
        grads[f"{self.name}.bias"] = g_bias
        if cache["plain"]:
            cols = cache["cols"]
            b = grad_out.shape[0]
            gflat = grad_out.reshape(b, self.c_out, -1)
            g_w = np.einsum("bol,brl->or", gflat, cols).reshape(self.weight.shape)
            wmat = cache["w"].reshape(self.c_out, -1)
            g_cols = np.einsum("or,bol->brl", wmat, gflat)
            g_x = col2im(g_cols, cache["x_shape"], self.kernel, self.cfg.stride, self.cfg.pad)
            grads[f"{self.name}.weight"] = g_w
            return grads, g_x

        cfg = self.cfg
        plan: TilingPlan = cache["plan"]
        table: ColumnTable = cache["table"]
        k = self.kernel
        n_split = self.n_split
        s_a = cache["s_a"]
        psums = cache["psums"]
        pcodes = cache["pcodes"]
        p_col = cache["p_col"]
        w_col = cache["w_col"]
        fused = cache["fused"]
        batch = cache["x_shape"][0]
        n_pos = cache["n_pos"]

        # output -> per-(split, tile, column) dequantized-psum gradients
        g_y0 = grad_out * s_a
        g_y0_flat = g_y0.reshape(batch, self.c_out, n_pos).transpose(1, 0, 2).reshape(
            self.c_out, batch * n_pos
        )
        n_rt, n_ct, opa = plan.n_array_rows, plan.n_array_cols, plan.oc_per_array
        g_ct = np.zeros((n_ct, opa, batch * n_pos))
        for ct in range(n_ct):
            oc0, oc1 = plan.output_range(ct)
            g_ct[ct, : oc1 - oc0] = g_y0_flat[oc0:oc1]
        shifts = 2.0 ** (cfg.cell_bits * np.arange(n_split))
        g_acc = g_ct[None] * shifts[:, None, None, None]
        g_deq = np.broadcast_to(g_acc[:, None], psums.shape)
        g_pcodes = g_deq * fused[..., None]

        # partial-sum quantizer: STE for the value path, analytic scale grad
        if cache["scales_p"] is not None:
            pspec: QuantSpec = cache["pspec"]
            z_p = psums / p_col[..., None]
            p_mask = (z_p >= -pspec.q_neg) & (z_p <= pspec.q_pos)
            g_psums = g_pcodes * p_mask / p_col[..., None]
            cid = table.colid[table.mask]
            x_cols = np.empty((table.n_columns, psums.shape[-1]))
            x_cols[cid] = psums[table.mask]
            up_cols = np.empty_like(x_cols)
            up_cols[cid] = (g_deq * w_col[..., None])[table.mask]
            grads[f"{self.name}.s_p"] = scale_grad(
                x_cols, cache["scales_p"], pspec, up_cols
            )
        else:
            g_psums = g_pcodes

        # fused-factor product-rule term of the weight-scale gradient
        scales_w: ScaleTensor = cache["scales_w"]
        wspec: QuantSpec = cache["wspec"]
        per_col_sum = (g_deq * pcodes * p_col[..., None]).sum(axis=-1)
        cid = table.colid[table.mask]
        col_sums = np.zeros(table.n_columns)
        col_sums[cid] = per_col_sum[table.mask]
        w_group_of_col = cache["w_group_of_col"]
        term_direct = np.bincount(
            w_group_of_col, weights=col_sums, minlength=scales_w.n_groups
        )

        # matmul backward through the array grid
        patches = cache["patches"]
        w_tiles = cache["w_tiles"]
        g_w_tiles = np.matmul(g_psums, patches[None, :, None].transpose(0, 1, 2, 4, 3))
        g_patches = np.matmul(w_tiles.transpose(0, 1, 2, 4, 3), g_psums).sum(axis=(0, 2))

        # untile to digit-plane gradients, then codes via the linear-share STE
        g_planes = np.zeros((n_split, self.c_out, self.c_in, k, k))
        for rt in range(n_rt):
            ic0, ic1 = plan.input_range(rt)
            seg_rows = (ic1 - ic0) * k * k
            for ct in range(n_ct):
                oc0, oc1 = plan.output_range(ct)
                g_planes[:, oc0:oc1, ic0:ic1] += g_w_tiles[
                    :, rt, ct, : oc1 - oc0, :seg_rows
                ].reshape(n_split, oc1 - oc0, ic1 - ic0, k, k)
        inv_shifts = (2.0 ** (-cfg.cell_bits * np.arange(n_split))) / n_split
        g_codes = g_planes * inv_shifts[:, None, None, None, None]

        # weight STE + the code-path term of the weight-scale gradient
        w = cache["w"]
        w_dup = np.broadcast_to(w, (n_split,) + w.shape)
        s_w_elem = scales_w.per_element(w_dup.shape)
        z_w = w_dup / s_w_elem
        w_mask = (z_w >= -wspec.q_neg) & (z_w <= wspec.q_pos)
        g_weight = (g_codes * w_mask / s_w_elem).sum(axis=0)
        grads[f"{self.name}.weight"] = g_weight
        gids_w = scales_w.expand_groups(w_dup.shape)
        term_code = np.bincount(
            gids_w.ravel(),
            weights=(g_codes * w_mask * (-z_w / s_w_elem)).ravel(),
            minlength=scales_w.n_groups,
        )
        sizes_w = np.bincount(gids_w.ravel(), minlength=scales_w.n_groups)
        grads[f"{self.name}.s_w"] = (term_direct + term_code) * grad_scale_factor(
            wspec, sizes_w
        )

        # patches -> activation codes -> input
        g_cols = np.zeros((batch, self.c_in * k * k, n_pos))
        for rt in range(n_rt):
            ic0, ic1 = plan.input_range(rt)
            seg_rows = (ic1 - ic0) * k * k
            g_cols[:, ic0 * k * k : ic1 * k * k] = (
                g_patches[rt, :seg_rows].reshape(seg_rows, batch, n_pos).transpose(1, 0, 2)
            )
        g_acodes = col2im(g_cols, cache["x_shape"], k, cfg.stride, cfg.pad)

        if cache["scales_a"] is not None:
            aspec: QuantSpec = cache["aspec"]
            x = cache["x"]
            z_a = x / s_a
            a_mask = (z_a >= -aspec.q_neg) & (z_a <= aspec.q_pos)
            g_x = g_acodes * a_mask / s_a
            direct_a = float(np.sum(grad_out * cache["y0"]))
            ste_a = float(np.sum(g_acodes * a_mask * (-z_a / s_a)))
            g_a = grad_scale_factor(aspec, np.array([x.size]))[0]
            grads[f"{self.name}.s_a"] = np.array([(direct_a + ste_a) * g_a])
        else:
            g_x = g_acodes
        return grads, g_x


class ToyModel:
    """Conv (quantized pipeline) stack -> ReLU -> average pool -> dense classifier."""

    def __init__(
        self,
        conv_channels: list[int],
        layer_cfgs: list[CimLayerConfig],
        kernel: int = 3,
        input_shape: tuple[int, int, int] = (1, 16, 16),
        pool: int = 4,
        n_classes: int = 2,
        seed: int = 0,
        quant_enabled: bool = True,
    ):
        if len(conv_channels) != len(layer_cfgs) or not conv_channels:
            raise ValueError("need one layer config per conv layer")
        self.input_shape = input_shape
        self.pool = pool
        self.n_classes = n_classes
        self.psum_active = False
        self.convs: list[CimConvLayer] = []
        c_in, h, w = input_shape
        for i, (c_out, cfg) in enumerate(zip(conv_channels, layer_cfgs)):
            rng = substream(seed, "init", i)
            self.convs.append(
                CimConvLayer(f"conv{i}", c_in, c_out, kernel, cfg, rng, quant_enabled)
            )
            h = (h + 2 * cfg.pad - kernel) // cfg.stride + 1
            w = (w + 2 * cfg.pad - kernel) // cfg.stride + 1
            c_in = c_out
        if h % pool or w % pool:
            raise ValueError(f"pool size {pool} does not divide feature map {h}x{w}")
        self.feat_dim = c_in * (h // pool) * (w // pool)
        self.feat_hw = (c_in, h, w)
        rng = substream(seed, "init", len(self.convs))
        self.dense_w = (
            rng.normal(0.0, np.sqrt(1.0 / self.feat_dim), size=(n_classes, self.feat_dim))
        ).astype(np.float32)
        self.dense_b = np.zeros(n_classes, dtype=np.float32)

    # -- parameters --------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.convs:
            out.update(layer.params())
        out["dense.weight"] = self.dense_w
        out["dense.bias"] = self.dense_b
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        if name == "dense.weight":
            self.dense_w = value.astype(np.float32)
        elif name == "dense.bias":
            self.dense_b = value.astype(np.float32)
        else:
            layer_name = name.split(".", 1)[0]
            for layer in self.convs:
                if layer.name == layer_name:
                    layer.set_param(name, value)
                    return
            raise KeyError(name)

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, theta_by_layer: dict[int, np.ndarray] | None = None):
        """Logits plus the caches needed for backward."""
        x = np.asarray(x, dtype=np.float64)
        caches = []
        h = x
        for i, layer in enumerate(self.convs):
            theta = theta_by_layer.get(i) if theta_by_layer else None
            pre, cache = layer.forward(h, self.psum_active, theta=theta)
            relu_mask = pre > 0
            h = np.where(relu_mask, pre, 0.0)
            caches.append((cache, relu_mask))
        b = h.shape[0]
        c, fh, fw = self.feat_hw
        pooled = h.reshape(b, c, fh // self.pool, self.pool, fw // self.pool, self.pool).mean(
            axis=(3, 5)
        )
        feat = pooled.reshape(b, self.feat_dim)
        logits = feat @ self.dense_w.astype(np.float64).T + self.dense_b.astype(np.float64)
        return logits, {"convs": caches, "feat": feat, "h_shape": h.shape}

    def backward(self, fwd_cache: dict, g_logits: np.ndarray) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        feat = fwd_cache["feat"]
        grads["dense.weight"] = g_logits.T @ feat
        grads["dense.bias"] = g_logits.sum(axis=0)
        g_feat = g_logits @ self.dense_w.astype(np.float64)
        b = g_feat.shape[0]
        c, fh, fw = self.feat_hw
        g_pooled = g_feat.reshape(b, c, fh // self.pool, fw // self.pool)
        g_h = np.repeat(
            np.repeat(g_pooled, self.pool, axis=2), self.pool, axis=3
        ) / (self.pool * self.pool)
        g = g_h
        for layer, (cache, relu_mask) in zip(
            reversed(self.convs), reversed(fwd_cache["convs"])
        ):
            g = np.where(relu_mask, g, 0.0)
            layer_grads, g = layer.backward(cache, g)
            grads.update(layer_grads)
        return grads

    def clip_count(self, fwd_cache: dict) -> int:
        total = 0
        for cache, _ in fwd_cache["convs"]:
            if not cache["plain"] and "trace" in cache:
                total += int(cache["trace"].clip_count.sum())
        return total


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    n = logits.shape[0]
    loss = -log_probs[np.arange(n), labels].mean()
    probs = np.exp(log_probs)
    g = probs
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


def forward_backward(model: ToyModel, batch: tuple[np.ndarray, np.ndarray]):
    """Loss and gradients for every weight and scale parameter."""
    x, labels = batch
    if np.asarray(x).shape[0] == 0:
        raise ValueError("empty batch")
    logits, cache = model.forward(x)
    loss, g_logits = _cross_entropy(logits, np.asarray(labels))
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss}; logit range "
            f"[{np.min(logits)}, {np.max(logits)}]"
        )
    grads = model.backward(cache, g_logits)
    return loss, grads, model.clip_count(cache)


def evaluate(
    model: ToyModel,
    data: Dataset,
    theta_by_layer: dict[int, np.ndarray] | None = None,
    batch_size: int = 256,
) -> float:
    """Top-1 accuracy; deterministic given (model, data, theta)."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for lo in range(0, len(data), batch_size):
        xb = data.images[lo : lo + batch_size]
        yb = data.labels[lo : lo + batch_size]
        logits, _ = model.forward(xb, theta_by_layer=theta_by_layer)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / len(data)


def train(
    model: ToyModel,
    data: tuple[Dataset, Dataset],
    schedule: TrainSchedule,
    seed: int,
    start_epoch: int = 0,
    velocity: dict[str, np.ndarray] | None = None,
) -> list[dict]:
    """SGD-with-momentum QAT; returns one log row per epoch.

    Deterministic given (model state, data, schedule, seed): every epoch's
    shuffle comes from its own (seed, epoch) stream, so training can resume
    from any epoch boundary and reproduce the original run exactly.
    """
    train_ds, test_ds = data
    params = model.params()
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
    log: list[dict] = []
    steps = (len(train_ds) + schedule.batch_size - 1) // schedule.batch_size * start_epoch
    for epoch in range(start_epoch, schedule.total_epochs):
        stage = 1 if epoch < schedule.stage1_epochs or schedule.mode == TrainMode.ONE_STAGE else 2
        psum_active = epoch >= schedule.psum_quant_enabled_from
        model.psum_active = psum_active
        rng = substream(seed, "training", epoch)
        order = rng.permutation(len(train_ds))
        lr = schedule.lr_at(epoch)
        losses = []
        clips = 0
        for lo in range(0, len(train_ds), schedule.batch_size):
            idx = order[lo : lo + schedule.batch_size]
            xb = train_ds.images[idx]
            yb = train_ds.labels[idx]
            if psum_active:
                _calibrate_psums_if_needed(model, xb)
            loss, grads, batch_clips = forward_backward(model, (xb, yb))
            params = model.params()
            for name, g in grads.items():
                is_scale = name.endswith((".s_w", ".s_a", ".s_p"))
                # scales use a smaller step and no momentum: their targets move
                # with the weights, and momentum overshoots per-column groups
                step = lr * schedule.scale_lr_factor if is_scale else lr
                mu = 0.0 if is_scale else schedule.momentum
                if not is_scale and schedule.weight_decay:
                    g = g + schedule.weight_decay * params[name].astype(np.float64)
                v = mu * velocity[name].astype(np.float64) - step * g
                velocity[name] = v.astype(np.float32)
                new = params[name].astype(np.float64) + v
                if is_scale:
                    new = np.maximum(new, SCALE_FLOOR)
                model.set_param(name, new.astype(np.float32))
            losses.append(loss)
            clips += batch_clips
            steps += 1
        acc = evaluate(model, test_ds)
        log.append(
            {
                "epoch": epoch,
                "stage": stage,
                "psum_active": int(psum_active),
                "loss": float(np.mean(losses)),
                "test_acc": acc,
                "steps": steps,
                "psum_clips": clips,
                "lr": lr,
            }
        )
    return log


def _calibrate_psums_if_needed(model: ToyModel, xb: np.ndarray) -> None:
    """Give every conv layer psum scales from its own input at this batch."""
    if all(layer.s_p_ready for layer in model.convs):
        return
    h = np.asarray(xb, dtype=np.float64)
    was_active = model.psum_active
    model.psum_active = False
    for layer in model.convs:
        if not layer.s_p_ready:
            layer.ensure_act_scale(h)
            layer.calibrate_psum_scales(h)
        pre, _ = layer.forward(h, psum_active=False)
        h = np.where(pre > 0, pre, 0.0)
    model.psum_active = was_active

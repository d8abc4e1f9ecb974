"""The three-adapter network.

* generality adapter (GA): three VGG-M style conv layers shared by both
  modalities;
* modality adapters (MA): one small conv block per GA layer and modality,
  running in parallel with GA and added to its output;
* instance adapter (IA): per-modality FC layers, quality-aware fusion and
  the per-domain binary classification branches.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import layers as L
from .layers import BatchNormState, LayerAttrs, ParamBlock

MODALITIES = ("rgb", "thermal")


@dataclass
class NetConfig:
    """Architecture hyper-parameters.  Defaults give the VGG-M sized network."""

    ga_channels: tuple = (96, 256, 512)
    ga_kernels: tuple = (7, 5, 3)
    ga_strides: tuple = (2, 1, 1)
    ga_dilations: tuple = (1, 1, 3)
    ga_paddings: tuple = (0, 0, 3)
    ma_kernels: tuple = (3, 1, 1)
    pooled: tuple = (True, True, False)
    pool_window: int = 3
    pool_stride: int = 2
    fc_width: int = 512
    roi_size: int = 7
    roi_sampling: int = 2
    lrn_params: tuple = L.LRN_DEFAULTS
    bn_params: tuple = L.BN_DEFAULTS
    dropout_rate: float = 0.5
    init_std: float = 0.01

    @property
    def pooled_dim(self) -> int:
        side = (self.roi_size - self.pool_window) // self.pool_stride + 1
        return self.ga_channels[-1] * side * side

    def geometry(self):
        """(stride, offset) mapping image pixels to layer-3 feature coordinates.

        A pixel coordinate ``p`` lands on feature index ``(p - offset) / stride - 0.5``,
        which is the convention :func:`layers.roialign` uses.
        """
        jump, start = 1.0, 0.5
        for k, s, d, p, pooled in zip(self.ga_kernels, self.ga_strides, self.ga_dilations,
                                      self.ga_paddings, self.pooled):
            start += ((k - 1) * d / 2 - p) * jump
            jump *= s
            if pooled:
                start += (self.pool_window - 1) / 2 * jump
                jump *= self.pool_stride
        return jump, start - jump / 2

    def feature_size(self, size: int) -> int:
        for k, s, d, p, pooled in zip(self.ga_kernels, self.ga_strides, self.ga_dilations,
                                      self.ga_paddings, self.pooled):
            size = L.conv_output_size(size, k, s, p, d)
            if pooled:
                size = (size - self.pool_window) // self.pool_stride + 1
            if size < 1:
                return 0
        return size


@dataclass(eq=False)
class Linear:
    w: ParamBlock
    b: ParamBlock

    @classmethod
    def init(cls, fan_in, fan_out, std, rng, dtype):
        w = (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)
        return cls(ParamBlock(w), ParamBlock(np.zeros(fan_out, dtype), weight_decay_enabled=False))

    def params(self):
        return [self.w, self.b]


@dataclass(eq=False)
class ConvBlock:
    w: ParamBlock
    b: ParamBlock

    @classmethod
    def init(cls, cout, cin, k, std, rng, dtype):
        w = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        return cls(ParamBlock(w), ParamBlock(np.zeros(cout, dtype), weight_decay_enabled=False))

    def params(self):
        return [self.w, self.b]


@dataclass(eq=False)
class MABlock:
    conv: ConvBlock
    ic: BatchNormState

    def params(self):
        return self.conv.params() + [self.ic.gamma, self.ic.beta]


@dataclass(eq=False)
class IAWeights:
    fc_r: Linear
    fc_t: Linear
    wp_r: Linear
    wp_t: Linear
    fusion: Linear
    instance: list = field(default_factory=list)

    # the re-encoding layers reuse the first FC layer of each modality
    @property
    def fc_r1(self) -> Linear:
        return self.fc_r

    @property
    def fc_t1(self) -> Linear:
        return self.fc_t

    def fc(self, modality):
        return self.fc_r if modality == "rgb" else self.fc_t

    def wp(self, modality):
        return self.wp_r if modality == "rgb" else self.wp_t

    def shared_params(self):
        out = []
        for lin in (self.fc_r, self.fc_t, self.wp_r, self.wp_t, self.fusion):
            out += lin.params()
        return out

    def output_sizes(self):
        return (self.fc_r.w.shape[1], self.fc_r1.w.shape[1], self.fc_t.w.shape[1],
                self.fc_t1.w.shape[1], self.wp_r.w.shape[1], self.wp_t.w.shape[1],
                self.fusion.w.shape[1], self.instance[0].w.shape[1] if self.instance else 2)


class Manet:
    """Weights of the whole network plus the architecture config."""

    def __init__(self, cfg: NetConfig | None = None, n_branches: int = 1, seed: int = 0,
                 dtype=np.float32):
        self.cfg = cfg = cfg or NetConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.ga: list[ConvBlock] = []
        cin = 3
        for cout, k in zip(cfg.ga_channels, cfg.ga_kernels):
            # He init stands in for pretrained VGG-M weights
            self.ga.append(ConvBlock.init(cout, cin, k, math.sqrt(2.0 / (cin * k * k)), rng, dtype))
            cin = cout
        self.ma: dict[str, list[MABlock]] = {}
        for m in MODALITIES:
            blocks, cin = [], 3
            for cout, k in zip(cfg.ga_channels, cfg.ma_kernels):
                blocks.append(MABlock(ConvBlock.init(cout, cin, k, cfg.init_std, rng, dtype),
                                      BatchNormState.identity(cout, dtype)))
                cin = cout
            self.ma[m] = blocks
        fw, pd = cfg.fc_width, cfg.pooled_dim
        std = cfg.init_std
        self.ia = IAWeights(
            fc_r=Linear.init(pd, fw, std, rng, dtype),
            fc_t=Linear.init(pd, fw, std, rng, dtype),
            wp_r=Linear.init(fw, 2, std, rng, dtype),
            wp_t=Linear.init(fw, 2, std, rng, dtype),
            fusion=Linear.init(2 * fw, fw, std, rng, dtype),
        )
        self._rng = rng
        for _ in range(n_branches):
            new_instance_head(self.ia, rng, std)

    # -- parameter bookkeeping -------------------------------------------------

    def named_params(self):
        """Unique parameter blocks by name (shared blocks appear once)."""
        out = {}
        for i, blk in enumerate(self.ga, 1):
            out[f"ga.conv{i}.w"], out[f"ga.conv{i}.b"] = blk.w, blk.b
        for m in MODALITIES:
            for i, blk in enumerate(self.ma[m], 1):
                out[f"ma.{m}.conv{i}.w"], out[f"ma.{m}.conv{i}.b"] = blk.conv.w, blk.conv.b
                out[f"ma.{m}.ic{i}.gamma"], out[f"ma.{m}.ic{i}.beta"] = blk.ic.gamma, blk.ic.beta
        for name in ("fc_r", "fc_t", "wp_r", "wp_t", "fusion"):
            lin = getattr(self.ia, name)
            out[f"ia.{name}.w"], out[f"ia.{name}.b"] = lin.w, lin.b
        for k, lin in enumerate(self.ia.instance):
            out[f"ia.instance{k}.w"], out[f"ia.instance{k}.b"] = lin.w, lin.b
        return out

    def buffers(self):
        out = {}
        for m in MODALITIES:
            for i, blk in enumerate(self.ma[m], 1):
                out[f"ma.{m}.ic{i}.running_mean"] = blk.ic.running_mean
                out[f"ma.{m}.ic{i}.running_var"] = blk.ic.running_var
        return out

    def ga_params(self):
        return [p for blk in self.ga for p in blk.params()]

    def ma_params(self, modality=None):
        mods = MODALITIES if modality is None else (modality,)
        return [p for m in mods for blk in self.ma[m] for p in blk.params()]

    def backbone_params(self):
        return self.ga_params() + self.ma_params()

    def all_params(self):
        return list(self.named_params().values())

    def zero_grad(self):
        for p in self.all_params():
            p.zero_grad()

    def backbone_checksum(self) -> str:
        """SHA-256 over GA/MA weights and IC running statistics."""
        h = hashlib.sha256()
        for name, arr in sorted({**{k: v.value for k, v in self.named_params().items()
                                    if k.startswith(("ga.", "ma."))},
                                 **self.buffers()}.items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def zero_modality_adapters(self):
        """Make every MA block output exactly zero (for ablations)."""
        for m in MODALITIES:
            for blk in self.ma[m]:
                for arr in (blk.conv.w.value, blk.conv.b.value, blk.ic.gamma.value,
                            blk.ic.beta.value, blk.ic.running_mean):
                    arr[...] = 0
                blk.ic.running_var[...] = 1

    def copy(self) -> "Manet":
        import copy
        return copy.deepcopy(self)

    # -- layer attributes ------------------------------------------------------

    def ga_attrs(self, layer: int, training: bool = False) -> LayerAttrs:
        c = self.cfg
        return LayerAttrs(stride=c.ga_strides[layer], dilation=c.ga_dilations[layer],
                          padding=c.ga_paddings[layer], pool_window=c.pool_window,
                          dropout_rate=c.dropout_rate, lrn_params=c.lrn_params,
                          bn_params=c.bn_params, training_mode=training)

    def pool_attrs(self) -> LayerAttrs:
        return LayerAttrs(stride=self.cfg.pool_stride, pool_window=self.cfg.pool_window)


def parameter_counts(model: Manet):
    """(GA params, MA params of one modality incl. IC scale/shift, MA conv params only)."""
    ga = sum(p.value.size for p in model.ga_params())
    ma = sum(p.value.size for p in model.ma_params("rgb"))
    ma_conv = sum(p.value.size for blk in model.ma["rgb"] for p in blk.conv.params())
    return ga, ma, ma_conv


# ---------------------------------------------------------------------------
# parallel weight decomposition


def diag_embed(small, size: int):
    """Embed the trailing (a, b) kernel dims of ``small`` in the centre of a size x size grid."""
    small = np.asarray(small)
    a, b = small.shape[-2:]
    if size < max(a, b) or (size - a) % 2 or (size - b) % 2:
        raise ValueError(f"cannot centre a {a}x{b} kernel in {size}x{size}: "
                         "size must be >= both sides with even differences")
    out = np.zeros(small.shape[:-2] + (size, size), dtype=small.dtype)
    r, c = (size - a) // 2, (size - b) // 2
    out[..., r : r + a, c : c + b] = small
    return out


def center_crop(big, a: int, b: int | None = None):
    b = a if b is None else b
    s = big.shape[-1]
    r, c = (big.shape[-2] - a) // 2, (s - b) // 2
    return big[..., r : r + a, c : c + b]


def compose_weights(ga_w, ma_w):
    """Full kernel W = W_GA + diag_S(W_MA) for one layer and modality."""
    if ga_w.shape[:2] != ma_w.shape[:2]:
        raise ValueError(f"channel mismatch between GA {ga_w.shape} and MA {ma_w.shape}")
    if ga_w.shape[2] != ga_w.shape[3]:
        raise ValueError("compose_weights expects square kernels")
    return ga_w + diag_embed(ma_w, ga_w.shape[2])


def _ma_shift(model: Manet, layer: int) -> int:
    """Padding (positive) or cropping (negative) that lets the small MA kernel see
    exactly the taps it would occupy inside the GA-sized kernel."""
    c = model.cfg
    return c.ga_paddings[layer] - (c.ga_kernels[layer] - c.ma_kernels[layer]) // 2 * c.ga_dilations[layer]


def _shift(x, p):
    if p > 0:
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    if p < 0:
        return x[:, :, -p : x.shape[2] + p, -p : x.shape[3] + p]
    return x


def _unshift(dx, p):
    if p > 0:
        return dx[:, :, p : dx.shape[2] - p, p : dx.shape[3] - p]
    if p < 0:
        return np.pad(dx, ((0, 0), (0, 0), (-p, -p), (-p, -p)))
    return dx


# ---------------------------------------------------------------------------
# backbone


def backbone_forward(model: Manet, images, modality: str, training: bool = False, rng=None):
    """Run GA and the modality's MA on a batch (N, 3, H, W) or a single image.

    Returns ``(features, taps, cache)`` where ``features`` is the fused
    layer-3 map (N, C, h, w) and ``taps`` lists the per-layer
    ``(ga_out, ma_out)`` pairs that feed the divergence loss.
    """
    x = images[None] if images.ndim == 3 else images
    if x.shape[1] != 3:
        raise ValueError(f"backbone expects 3-channel images, got {x.shape}")
    if model.cfg.feature_size(min(x.shape[2:])) < 1:
        raise ValueError(f"input {x.shape[2:]} collapses to an empty feature map")
    x = x.astype(model.dtype, copy=False)
    taps, caches = [], []
    pool_attrs = model.pool_attrs()
    for l in range(3):
        attrs = model.ga_attrs(l, training)
        ga, ma = model.ga[l], model.ma[modality][l]
        c = {}
        # GA path: conv -> ReLU -> [LRN] -> [pool]
        g, c["g_conv"] = L.conv2d(x, ga.w.value, ga.b.value, attrs)
        g, c["g_relu"] = L.relu(g)
        if model.cfg.pooled[l]:
            g, c["g_lrn"] = L.lrn(g, attrs)
            g, c["g_pool"] = L.maxpool(g, pool_attrs)
        # MA path: conv -> ReLU -> IC -> [pool]
        shift = _ma_shift(model, l)
        ma_attrs = LayerAttrs(stride=attrs.stride, dilation=attrs.dilation)
        a, c["m_conv"] = L.conv2d(_shift(x, shift), ma.conv.w.value, ma.conv.b.value, ma_attrs)
        a, c["m_relu"] = L.relu(a)
        a, c["m_ic"] = L.ic_layer(a, ma.ic, attrs, rng)
        if model.cfg.pooled[l]:
            a, c["m_pool"] = L.maxpool(a, pool_attrs)
        c["shift"] = shift
        taps.append((g, a))
        caches.append(c)
        x = g + a
    return x, taps, caches


def backbone_backward(model: Manet, dout, modality: str, caches, d_taps=None, need_input_grad=True):
    """Accumulate GA/MA gradients; ``d_taps`` optionally adds per-layer (dGA, dMA).

    Returns the image gradient, or None when ``need_input_grad`` is false.
    """
    dx = dout
    for l in reversed(range(3)):
        c = caches[l]
        ga, ma = model.ga[l], model.ma[modality][l]
        dg = dx
        da = dx
        if d_taps is not None and d_taps[l] is not None:
            tg, tm = d_taps[l]
            dg = dg + tg if tg is not None else dg
            da = da + tm if tm is not None else da
        if model.cfg.pooled[l]:
            dg = L.maxpool_backward(dg, c["g_pool"])
            dg = L.lrn_backward(dg, c["g_lrn"])
        dg = L.relu_backward(dg, c["g_relu"])
        need_dx = l > 0 or need_input_grad
        dxg, dw, db = L.conv2d_backward(dg, c["g_conv"], need_dx)
        ga.w.grad += dw
        ga.b.grad += db
        if model.cfg.pooled[l]:
            da = L.maxpool_backward(da, c["m_pool"])
        da, dgam, dbet = L.ic_layer_backward(da, c["m_ic"])
        ma.ic.gamma.grad += dgam
        ma.ic.beta.grad += dbet
        da = L.relu_backward(da, c["m_relu"])
        dxm, dw, db = L.conv2d_backward(da, c["m_conv"], need_dx)
        ma.conv.w.grad += dw
        ma.conv.b.grad += db
        dx = dxg + _unshift(dxm, c["shift"]) if need_dx else None
    return dx


def roi_matrix(model: Manet, boxes, height: int, width: int):
    """RoIAlign interpolation matrix for image-pixel ``boxes`` on a layer-3 map."""
    stride, offset = model.cfg.geometry()
    return L.roialign_matrix(boxes, height, width, 1.0 / stride, model.cfg.roi_size,
                             model.cfg.roi_sampling, offset, dtype=model.dtype)


def pooled_features(model: Manet, fmap, boxes, matrix=None):
    """RoIAlign to 7x7 then 3x3 max-pool of one map; returns ((n, 9*C), cache).

    ``matrix`` (from :func:`roi_matrix`) lets both modalities share one
    interpolation matrix for the same boxes.
    """
    fmap = fmap if fmap.ndim == 4 else fmap[None]
    p, cache = pooled_features_batch(model, fmap, np.asarray(boxes)[None], matrix)
    return p[0], cache


def pooled_features_backward(dpooled, cache):
    return pooled_features_batch_backward(dpooled[None], cache)[0]


def pooled_features_batch(model: Manet, fmaps, boxes, matrix=None):
    """RoIAlign + pool for F maps at once, each with its own n boxes.

    ``fmaps`` is (F, C, h, w) and ``boxes`` (F, n, 4).  Returns
    ((F, n, 9*C), cache); the feature vector is laid out position-major,
    channels fastest.
    """
    f, c, h, w = fmaps.shape
    boxes = np.asarray(boxes, dtype=np.float64)
    n = boxes.shape[1]
    r = model.cfg.roi_size
    if matrix is None:
        # block-diagonal: frame i's boxes only read frame i's map
        matrix = sparse.block_diag([roi_matrix(model, b, h, w) for b in boxes], format="csr")
    flat = np.ascontiguousarray(fmaps.transpose(0, 2, 3, 1)).reshape(f * h * w, c)
    out = np.asarray(matrix @ flat).reshape(f * n, r, r, c)
    p, arg = L.maxpool_nhwc(out, model.cfg.pool_window, model.cfg.pool_stride)
    geom = (model.cfg.pool_window, model.cfg.pool_stride)
    return p.reshape(f, n, -1), (matrix, fmaps.shape, arg, out.shape, p.shape, geom)


def pooled_features_batch_backward(dpooled, cache):
    matrix, (f, c, h, w), arg, rshape, pshape, geom = cache
    d = L.maxpool_nhwc_backward(dpooled.reshape(pshape), arg, rshape, *geom)
    df = np.asarray(matrix.T @ d.reshape(-1, c)).reshape(f, h, w, c)
    return np.ascontiguousarray(df.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# instance adapter


def modality_weight(pos_scores, neg_scores):
    """eta = sigmoid(|mean(P - N)|) over the candidate set."""
    pos = np.asarray(pos_scores)
    neg = np.asarray(neg_scores)
    if pos.size == 0:
        raise ValueError("modality_weight needs at least one candidate")
    return float(1.0 / (1.0 + np.exp(-abs(np.mean(pos - neg)))))


def new_instance_head(ia: IAWeights, rng, std: float = 0.01) -> int:
    """Append a freshly initialised 512 -> 2 branch; returns its index."""
    fw = ia.fusion.w.shape[1]
    ia.instance.append(Linear.init(fw, 2, std, rng, ia.fusion.w.value.dtype))
    return len(ia.instance) - 1


def instance_forward(ia: IAWeights, pooled_rgb, pooled_t, branch: int, training=False, rng=None,
                     dropout_rate=0.5, all_branches=False, fixed_eta=None):
    """Score candidates.  Returns (S_fusion, S_R, S_T, (eta_rgb, eta_t), cache).

    With ``all_branches`` the cache also holds logits of every branch under
    ``cache["all"]`` (n, K, 2), needed by the instance-embedding loss.
    ``fixed_eta`` overrides the predicted modality weights (ablation hook).
    """
    if not 0 <= branch < len(ia.instance):
        raise IndexError(f"branch {branch} out of range (have {len(ia.instance)})")
    rate = dropout_rate
    cache = {"branch": branch, "rate": rate}
    single, codes, etas = {}, [], []
    for m, x in zip(MODALITIES, (pooled_rgb, pooled_t)):
        fc, wp = ia.fc(m), ia.wp(m)
        c = {"x": x}
        xw = x @ fc.w.value
        a = xw + fc.b.value
        h, _ = L.relu(a)
        hd, c["wp_mask"] = L.dropout(h, rate, training, rng)
        z = hd @ wp.w.value + wp.b.value
        p, _ = L.softmax2(z)
        diff = np.mean(p[:, 1] - p[:, 0])
        eta = 1.0 / (1.0 + np.exp(-abs(diff))) if fixed_eta is None else fixed_eta
        eta = np.asarray(eta, dtype=x.dtype)
        # re-encode eta * x through the same FC layer: (eta x) W + b
        a2 = eta * xw + fc.b.value
        h2, _ = L.relu(a2)
        h2d, c["fc1_mask"] = L.dropout(h2, rate, training, rng)
        c.update(xw=xw, a=a, hd=hd, p=p, diff=diff, eta=eta, a2=a2, fixed=fixed_eta is not None)
        cache[m] = c
        single[m] = z
        codes.append(h2d)
        etas.append(float(eta))
    f = np.concatenate(codes, axis=1)
    u = f @ ia.fusion.w.value + ia.fusion.b.value
    uh, _ = L.relu(u)
    ud, cache["fusion_mask"] = L.dropout(uh, rate, training, rng)
    inst = ia.instance[branch]
    s_fusion = ud @ inst.w.value + inst.b.value
    cache.update(f=f, u=u, ud=ud)
    if all_branches:
        cache["all"] = np.stack([ud @ br.w.value + br.b.value for br in ia.instance], axis=1)
    return s_fusion, single["rgb"], single["thermal"], tuple(etas), cache


def instance_backward(ia: IAWeights, cache, d_fusion, d_r=None, d_t=None, d_all=None):
    """Accumulate IA gradients; returns (d_pooled_rgb, d_pooled_t)."""
    ud = cache["ud"]
    inst = ia.instance[cache["branch"]]
    inst.w.grad += ud.T @ d_fusion
    inst.b.grad += d_fusion.sum(axis=0)
    dud = d_fusion @ inst.w.value.T
    if d_all is not None:
        for k, br in enumerate(ia.instance):
            g = d_all[:, k]
            br.w.grad += ud.T @ g
            br.b.grad += g.sum(axis=0)
            dud = dud + g @ br.w.value.T
    du = L.relu_backward(L.dropout_backward(dud, cache["fusion_mask"]), cache["u"])
    ia.fusion.w.grad += cache["f"].T @ du
    ia.fusion.b.grad += du.sum(axis=0)
    df = du @ ia.fusion.w.value.T
    fw = ia.fc_r.w.shape[1]
    outs = []
    for k, (m, dz_direct) in enumerate(zip(MODALITIES, (d_r, d_t))):
        c = cache[m]
        fc, wp = ia.fc(m), ia.wp(m)
        x, eta = c["x"], c["eta"]
        dh2 = L.dropout_backward(df[:, k * fw : (k + 1) * fw], c["fc1_mask"])
        da2 = dh2 * (c["a2"] > 0)
        # a2 = eta * (x W) + b
        dxw = eta * da2
        fc.b.grad += da2.sum(axis=0)
        dz = np.zeros_like(c["p"]) if dz_direct is None else dz_direct.copy()
        if not c["fixed"]:
            deta = float((da2 * c["xw"]).sum())
            dabs = deta * float(eta) * (1.0 - float(eta))
            n = len(x)
            sgn = np.sign(c["diff"])
            dp = np.zeros_like(c["p"])
            dp[:, 1] = dabs * sgn / n
            dp[:, 0] = -dabs * sgn / n
            dz = dz + L.softmax2_backward(dp, c["p"])
        wp.w.grad += c["hd"].T @ dz
        wp.b.grad += dz.sum(axis=0)
        dh = L.dropout_backward(dz @ wp.w.value.T, c["wp_mask"])
        da = dh * (c["a"] > 0)
        fc.b.grad += da.sum(axis=0)
        dxw = dxw + da
        fc.w.grad += x.T @ dxw
        outs.append(dxw @ fc.w.value.T)
    return outs[0], outs[1]

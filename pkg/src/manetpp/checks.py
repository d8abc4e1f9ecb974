"""Finite-difference gradient suite over every layer, the adapters and the losses.

Each case builds a small double-precision problem, projects the op's output
on a fixed random direction to get a scalar, and compares the hand-derived
backward pass with central differences.  ``corrupt`` names cases whose
analytic gradient gets a deliberate sign error (negative control).
"""
from __future__ import annotations

import numpy as np

from . import adapters as A
from . import layers as L
from . import losses as Lo
from .gradcheck import GradcheckReport, gradcheck


def _project(fwd, bwd, inputs, rng, name, corrupt, tolerance):
    out = fwd()[0]
    r = rng.standard_normal(out.shape)

    def f():
        return float((fwd()[0] * r).sum())

    grads = bwd(r, fwd()[1])
    analytic = dict(zip(inputs, grads))
    if name in corrupt:
        analytic = {k: -v for k, v in analytic.items()}
    return gradcheck(f, inputs, analytic, name, tolerance)


def _layer_cases(rng, corrupt, tol):
    reports = []
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for name, attrs in (("conv2d_dilated", L.LayerAttrs(dilation=3, padding=3)),
                        ("conv2d_strided", L.LayerAttrs(stride=2, padding=1))):
        reports.append(_project(lambda a=attrs: L.conv2d(x, w, b, a), L.conv2d_backward,
                                {"x": x, "w": w, "b": b}, rng, name, corrupt, tol))
    xf = rng.standard_normal((4, 6))
    wf = rng.standard_normal((6, 3))
    bf = rng.standard_normal(3)
    reports.append(_project(lambda: L.fully_connected(xf, wf, bf), L.fully_connected_backward,
                            {"x": xf, "w": wf, "b": bf}, rng, "fully_connected", corrupt, tol))
    xr = rng.standard_normal((3, 5))
    reports.append(_project(lambda: L.relu(xr), lambda d, c: (L.relu_backward(d, c),),
                            {"x": xr}, rng, "relu", corrupt, tol))
    # large activations so the normalizer is far from k
    xl = rng.standard_normal((2, 8, 3, 3)) * 10
    reports.append(_project(lambda: L.lrn(xl, L.LayerAttrs()), lambda d, c: (L.lrn_backward(d, c),),
                            {"x": xl}, rng, "lrn", corrupt, tol))
    st = L.BatchNormState.identity(5, np.float64)
    st.gamma.value[:] = rng.standard_normal(5)
    st.beta.value[:] = rng.standard_normal(5)
    xb = rng.standard_normal((4, 5, 3, 3))
    train = L.LayerAttrs(training_mode=True, dropout_rate=0.0)

    def ic_fwd():
        saved = st.running_mean.copy(), st.running_var.copy()
        out = L.ic_layer(xb, st, train)
        st.running_mean[...], st.running_var[...] = saved
        return out

    reports.append(_project(ic_fwd, L.ic_layer_backward,
                            {"x": xb, "gamma": st.gamma.value, "beta": st.beta.value},
                            rng, "ic_layer", corrupt, tol))
    xp = rng.standard_normal((2, 3, 7, 7))
    pool = L.LayerAttrs(stride=2, pool_window=3)
    reports.append(_project(lambda: L.maxpool(xp, pool), lambda d, c: (L.maxpool_backward(d, c),),
                            {"x": xp}, rng, "maxpool", corrupt, tol))
    fm = rng.standard_normal((1, 3, 8, 8))
    boxes = np.array([[3.3, 5.1, 20.2, 17.9], [0.0, 0.0, 40.0, 40.0], [-10.0, -5.0, 30.0, 30.0]])
    reports.append(_project(lambda: L.roialign(fm, boxes, 0.25, 7, 2, 2.0),
                            lambda d, c: (L.roialign_backward(d, c),),
                            {"features": fm}, rng, "roialign", corrupt, tol))
    z = rng.standard_normal((5, 2))
    reports.append(_project(lambda: L.softmax2(z), lambda d, c: (L.softmax2_backward(d, c),),
                            {"z": z}, rng, "softmax2", corrupt, tol))
    return reports


def small_net_config(**overrides):
    cfg = dict(ga_channels=(4, 6, 8), fc_width=6, dropout_rate=0.0)
    cfg.update(overrides)
    return A.NetConfig(**cfg)


def _well_scaled_model(rng, n_branches=3):
    model = A.Manet(small_net_config(), n_branches=n_branches, seed=int(rng.integers(1 << 30)),
                    dtype=np.float64)
    for p in model.all_params():
        p.value[...] = rng.standard_normal(p.value.shape) * 0.5
    return model


def _grads_of(model, prefixes):
    ins, an = {}, {}
    for k, p in model.named_params().items():
        if k.startswith(prefixes):
            ins[k], an[k] = p.value, p.grad.copy()
    return ins, an


def _adapter_cases(rng, corrupt, tol):
    reports = []
    model = _well_scaled_model(rng)
    images = {m: rng.standard_normal((2, 3, 40, 40)) for m in A.MODALITIES}
    dirs = {}

    def backbone_obj(backward=False):
        total = 0.0
        for m in A.MODALITIES:
            saved = [(b.ic.running_mean.copy(), b.ic.running_var.copy()) for b in model.ma[m]]
            f, taps, c = A.backbone_forward(model, images[m], m, training=True)
            for blk, (rm, rv) in zip(model.ma[m], saved):
                blk.ic.running_mean[...], blk.ic.running_var[...] = rm, rv
            if m not in dirs:
                dirs[m] = (rng.standard_normal(f.shape),
                           [(rng.standard_normal(g.shape), rng.standard_normal(a.shape)) for g, a in taps])
            r, rt = dirs[m]
            total += float((f * r).sum())
            total += sum(float((g * rg).sum() + (a * ra).sum()) for (g, a), (rg, ra) in zip(taps, rt))
            if backward:
                A.backbone_backward(model, r, m, c, rt)
        return total

    model.zero_grad()
    backbone_obj(backward=True)
    ins, an = _grads_of(model, ("ga.", "ma."))
    if "backbone" in corrupt:
        an = {k: -v for k, v in an.items()}
    reports.append(gradcheck(backbone_obj, ins, an, "backbone (GA+MA)", tol))

    n, pd = 6, model.cfg.pooled_dim
    xr, xt = rng.standard_normal((n, pd)), rng.standard_normal((n, pd))
    r = rng.standard_normal((n, 2))
    rr, rt_ = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))

    def ia_obj():
        sf, sr, st, _, _ = A.instance_forward(model.ia, xr, xt, 1)
        return float((sf * r).sum() + (sr * rr).sum() + (st * rt_).sum())

    model.zero_grad()
    _, _, _, _, cache = A.instance_forward(model.ia, xr, xt, 1)
    dxr, dxt = A.instance_backward(model.ia, cache, r, rr, rt_)
    ins, an = _grads_of(model, ("ia.",))
    ins.update(pooled_rgb=xr, pooled_t=xt)
    an.update(pooled_rgb=dxr, pooled_t=dxt)
    if "instance_adapter" in corrupt:
        an = {k: -v for k, v in an.items()}
    reports.append(gradcheck(ia_obj, ins, an, "instance_adapter", tol))

    fmap = rng.standard_normal((1, 8, 6, 6))
    boxes = np.array([[20.0, 18.0, 30.0, 26.0], [5.0, 9.0, 40.0, 33.0]])
    reports.append(_project(lambda: A.pooled_features(model, fmap, boxes),
                            lambda d, c: (A.pooled_features_backward(d, c),),
                            {"features": fmap}, rng, "roialign+pool", corrupt, tol))
    return reports


def _loss_cases(rng, corrupt, tol):
    reports = []
    fam = Lo.KernelFamily.default()

    def check(name, fn, inputs, grads):
        if name in corrupt:
            grads = {k: -v for k, v in grads.items()}
        reports.append(gradcheck(fn, inputs, grads, name, tol))

    x = rng.standard_normal((8, 5)) * 0.3
    y = rng.standard_normal((8, 5)) * 0.3 + 0.2
    _, dx, dy = Lo.mkmmd_unbiased_grad(x, y, fam)
    check("mkmmd_unbiased", lambda: Lo.mkmmd_unbiased(x, y, fam), {"x": x, "y": y}, {"x": dx, "y": dy})

    maps = {f"{src}{j}_{m}": rng.standard_normal((4, 3, 2, 2)) * 0.4
            for src in ("ga", "ma") for j in range(3) for m in ("rgb", "t")}

    def hd_value(grad=False):
        ga = [(Lo.spatial_mean(maps[f"ga{j}_rgb"]), Lo.spatial_mean(maps[f"ga{j}_t"])) for j in range(3)]
        ma = [(Lo.spatial_mean(maps[f"ma{j}_rgb"]), Lo.spatial_mean(maps[f"ma{j}_t"])) for j in range(3)]
        out = Lo.hd_loss_grad(ga, ma, fam)
        if not grad:
            return out[0]
        g = {}
        for src, d in (("ga", out[3]), ("ma", out[4])):
            for j, (dr, dt) in enumerate(d):
                g[f"{src}{j}_rgb"] = Lo.spatial_mean_backward(dr, maps[f"{src}{j}_rgb"].shape)
                g[f"{src}{j}_t"] = Lo.spatial_mean_backward(dt, maps[f"{src}{j}_t"].shape)
        return g

    check("hd_loss", hd_value, maps, hd_value(grad=True))

    logits = rng.standard_normal((6, 2))
    labels = np.array([1, 0, 0, 1, 0, 0])
    _, d = Lo.bce_loss_grad(logits, labels)
    check("bce_loss", lambda: Lo.bce_loss(logits, labels), {"logits": logits}, {"logits": d})

    sf, sr, st = (rng.standard_normal((6, 2)) for _ in range(3))
    cfg = Lo.LossConfig.offline()
    _, _, df, dr, dt = Lo.cls_loss_grad(sf, sr, st, labels, cfg)
    check("cls_loss", lambda: Lo.cls_loss(sf, sr, st, labels, cfg),
          {"s_fusion": sf, "s_r": sr, "s_t": st}, {"s_fusion": df, "s_r": dr, "s_t": dt})

    pos = rng.standard_normal((5, 4))
    _, dp = Lo.instance_embedding_loss_grad(pos, 2)
    check("instance_embedding_loss", lambda: Lo.instance_embedding_loss(pos, 2), {"pos": pos}, {"pos": dp})

    # total loss on shared logits and features, at an iteration where nu2 = 0.1
    feats = {k: rng.standard_normal((4, 3)) * 0.4 for k in ("ga_r", "ga_t", "ma_r", "ma_t")}
    allb = rng.standard_normal((6, 3, 2))
    it = 300

    def total(grad=False):
        l_cls, _, df, dr, dt = Lo.cls_loss_grad(sf, sr, st, labels, cfg)
        l_inst, dpos = Lo.instance_embedding_loss_grad(allb[labels == 1, :, 1], 0)
        ga = [(feats["ga_r"], feats["ga_t"])] * 3
        ma = [(feats["ma_r"], feats["ma_t"])] * 3
        l_hd, _, _, dga, dma = Lo.hd_loss_grad(ga, ma, fam)
        val = Lo.total_loss(l_cls, l_inst, l_hd, cfg, it)
        if not grad:
            return val
        nu2 = cfg.nu2(it)
        dall = np.zeros_like(allb)
        dall[labels == 1, :, 1] = cfg.nu1 * dpos
        return {"s_fusion": df, "s_r": dr, "s_t": dt, "all_branches": dall,
                "ga_r": nu2 * sum(d[0] for d in dga), "ga_t": nu2 * sum(d[1] for d in dga),
                "ma_r": nu2 * sum(d[0] for d in dma), "ma_t": nu2 * sum(d[1] for d in dma)}

    check("total_loss", total, {"s_fusion": sf, "s_r": sr, "s_t": st, "all_branches": allb, **feats},
          total(grad=True))
    return reports


def run_suite(seed: int = 0, tolerance: float = 1e-4, corrupt=()) -> list[GradcheckReport]:
    rng = np.random.default_rng(seed)
    corrupt = set(corrupt)
    return _layer_cases(rng, corrupt, tolerance) + _adapter_cases(rng, corrupt, tolerance) \
        + _loss_cases(rng, corrupt, tolerance)

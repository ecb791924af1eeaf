"""Map-learning model: per-camera view transform into camera-frame top-down
rasters, a shared point network for pillars, and a convolutional BEV decoder
with semantic, instance-embedding and direction heads.

The view transformer is a per-camera two-layer dense network applied to the
flattened perspective plane, shared across channels, so it relaxes any fixed
homography while staying deterministic.  The decoder realizes 3x3
convolutions as dense layers over unrolled patches.  Losses: softmax
cross-entropy for semantics, a pull/push clustering loss on embeddings, and
a two-hot direction classification that never backpropagates through
background cells.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import BevConfig
from .maps import VectorMap, polyline_cells, resolve_thickness
from .metrics import sample_polyline
from .numerics import (
    DenseLayer,
    DenseNet,
    Grid2D,
    _apply_activation,
    _as_float64,
    adam_init,
    adam_step_layers,
    init_dense_layer,
    net_backward,
    net_forward_batch,
    net_forward_cached,
    softmax_cross_entropy,
)


@dataclass
class LossWeights:
    """Clustering-loss weights: pull margin delta_v, push margin delta_d."""

    alpha: float = 1.0
    beta: float = 1.0
    delta_v: float = 0.5
    delta_d: float = 3.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.delta_v, self.delta_d) <= 0.0:
            raise ValueError("loss weights and margins must be positive")


@dataclass
class LabelPack:
    """Co-registered training labels on one BEV raster.

    semantic: one-hot class grid (background in channel 0);
    instance: integer ids, 0 for background;
    direction: two-hot angle-bin grid, all-zero on background.
    """

    semantic: Grid2D
    instance: np.ndarray
    direction: Grid2D

    def __post_init__(self):
        self.instance = np.asarray(self.instance)
        if not np.issubdtype(self.instance.dtype, np.integer):
            rounded = np.rint(self.instance)
            if not np.all(self.instance == rounded):
                raise ValueError("instance ids must be integers")
            self.instance = rounded.astype(np.int64)
        else:
            self.instance = self.instance.astype(np.int64)
        h, w = self.semantic.height, self.semantic.width
        if self.instance.shape != (h, w):
            raise ValueError("instance grid does not match the semantic raster")
        if (self.direction.height, self.direction.width) != (h, w):
            raise ValueError("direction grid does not match the semantic raster")
        sem = self.semantic.data
        if not np.all(np.isin(sem, (0.0, 1.0))) or not np.all(sem.sum(axis=2) == 1.0):
            raise ValueError("semantic grid must be one-hot per cell")
        if np.any(self.instance < 0):
            raise ValueError("instance ids must be nonnegative")
        fg = sem[:, :, 0] == 0.0
        if not np.array_equal(fg, self.instance > 0):
            raise ValueError("instance id must be nonzero exactly on non-background cells")
        d = self.direction.data
        if not np.all(np.isin(d, (0.0, 1.0))):
            raise ValueError("direction labels must be 0/1")
        counts = d.sum(axis=2)
        if not np.all(np.isin(counts, (0.0, 2.0))):
            raise ValueError("direction rows must be empty or two-hot")

    @property
    def n_classes(self) -> int:
        return self.semantic.channels - 1


@dataclass
class ViewTransformParams:
    """One dense network per camera mapping flattened perspective planes to
    flattened camera-frame top-down planes, shared across channels."""

    nets: list
    persp_shape: tuple
    topdown_shape: tuple

    def __post_init__(self):
        hp, wp = self.persp_shape
        ht, wt = self.topdown_shape
        if not self.nets:
            raise ValueError("need at least one camera network")
        for i, net in enumerate(self.nets):
            if net.in_size != hp * wp or net.out_size != ht * wt:
                raise ValueError(
                    f"camera {i} network maps {net.in_size}->{net.out_size}, "
                    f"expected {hp * wp}->{ht * wt}"
                )


def neural_view_transform(persp: Grid2D, params: ViewTransformParams,
                          camera_index: int) -> Grid2D:
    """Map a perspective feature grid into the camera top-down frame.

    Applies the camera's network to each channel's flattened plane, so the
    channel count is preserved.
    """
    if not 0 <= camera_index < len(params.nets):
        raise ValueError(f"camera index {camera_index} out of range")
    hp, wp = params.persp_shape
    if (persp.height, persp.width) != (hp, wp):
        raise ValueError(
            f"perspective grid {persp.height}x{persp.width} does not match "
            f"configured {hp}x{wp}"
        )
    ht, wt = params.topdown_shape
    x = persp.data.reshape(hp * wp, persp.channels).T
    out = net_forward_batch(params.nets[camera_index], x)
    return Grid2D(out.T.reshape(ht, wt, persp.channels))


@dataclass
class DecoderParams:
    """3x3 conv trunk (dense layers over unrolled patches) plus 1x1 heads."""

    trunk: list
    seg_head: DenseLayer
    emb_head: DenseLayer
    dir_head: DenseLayer

    def __post_init__(self):
        if not self.trunk:
            raise ValueError("decoder trunk must have at least one layer")
        for i, layer in enumerate(self.trunk):
            if layer.in_size % 9 != 0:
                raise ValueError(f"trunk layer {i} input {layer.in_size} is not 9*channels")
            if i > 0 and layer.in_size != 9 * self.trunk[i - 1].out_size:
                raise ValueError(f"trunk layer {i} does not chain over patches")
            if layer.activation != "relu":
                raise ValueError("trunk layers use relu")
        width = self.trunk[-1].out_size
        for name, head in (("seg", self.seg_head), ("emb", self.emb_head),
                           ("dir", self.dir_head)):
            if head.in_size != width:
                raise ValueError(f"{name} head input {head.in_size} != trunk width {width}")
            if head.activation != "identity":
                raise ValueError("heads emit raw outputs")

    @property
    def in_channels(self) -> int:
        return self.trunk[0].in_size // 9


def _im2col3(data: np.ndarray) -> np.ndarray:
    """Unroll zero-padded 3x3 patches of (H, W, C) into rows of (H*W, 9C).

    Patch order is (kernel_row, kernel_col, channel); conv weights use the
    same layout.
    """
    h, w, c = data.shape
    pad = np.pad(data, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(pad, (3, 3), axis=(0, 1))
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, 9 * c)


def _col2im3(dcols: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    """Adjoint of _im2col3: scatter patch-row gradients back onto the grid."""
    d = dcols.reshape(h, w, 3, 3, c)
    out = np.zeros((h + 2, w + 2, c))
    for kr in range(3):
        for kc in range(3):
            out[kr:kr + h, kc:kc + w] += d[:, :, kr, kc, :]
    return out[1:h + 1, 1:w + 1]


def decode_bev_cached(features: Grid2D, params: DecoderParams):
    if features.channels != params.in_channels:
        raise ValueError(
            f"feature channels {features.channels} != decoder input {params.in_channels}"
        )
    h, w = features.height, features.width
    a = features.data
    trunk_cache = []
    for layer in params.trunk:
        cols = _im2col3(a)
        out = np.maximum(cols @ layer.weight.T + layer.bias, 0.0)
        trunk_cache.append((cols, out))
        a = out.reshape(h, w, layer.out_size)
    flat = a.reshape(h * w, -1)
    heads = {}
    for name, head in (("seg", params.seg_head), ("emb", params.emb_head),
                       ("dir", params.dir_head)):
        heads[name] = Grid2D((flat @ head.weight.T + head.bias).reshape(h, w, head.out_size))
    return heads["seg"], heads["emb"], heads["dir"], (trunk_cache, flat, (h, w))


def decode_bev(features: Grid2D, params: DecoderParams):
    """Decode fused BEV features into (seg logits, embeddings, dir logits)."""
    seg, emb, dirs, _ = decode_bev_cached(features, params)
    return seg, emb, dirs


def decode_bev_backward(params: DecoderParams, cache, d_seg: np.ndarray,
                        d_emb: np.ndarray, d_dir: np.ndarray):
    """Backprop through the decoder.

    Head/trunk gradients come back as [(dW, db)] lists; also returns the
    gradient w.r.t. the input features as an (H, W, C) array.
    """
    trunk_cache, flat, (h, w) = cache
    head_grads = []
    d_flat = np.zeros_like(flat)
    for head, d_out in ((params.seg_head, d_seg), (params.emb_head, d_emb),
                        (params.dir_head, d_dir)):
        dz = d_out.reshape(h * w, head.out_size)
        head_grads.append((dz.T @ flat, dz.sum(axis=0)))
        d_flat += dz @ head.weight
    trunk_grads = []
    da = d_flat
    for k in reversed(range(len(params.trunk))):
        layer = params.trunk[k]
        cols, out = trunk_cache[k]
        dz = da * (out > 0.0)
        trunk_grads.append((dz.T @ cols, dz.sum(axis=0)))
        dcols = dz @ layer.weight
        c_in = layer.in_size // 9
        d_grid = _col2im3(dcols, h, w, c_in)
        da = d_grid.reshape(h * w, c_in)
    trunk_grads.reverse()
    return trunk_grads, head_grads, d_grid


def discriminative_loss(embeddings: Grid2D, instance: np.ndarray, w: LossWeights):
    """Pull/push clustering loss over per-cell embeddings, with its gradient.

    Background cells (id 0) are excluded.  Within each instance, members are
    pulled toward the cluster mean once their L1 distance exceeds delta_v;
    cluster means push each other apart until 2*delta_d.  Both hinges are
    squared; normalization is per cluster and per ordered cluster pair.
    Gradients flow through the cluster means.
    """
    emb = embeddings.data
    ids = np.asarray(instance)
    if ids.shape != (embeddings.height, embeddings.width):
        raise ValueError("instance grid does not match the embedding raster")
    if not np.issubdtype(ids.dtype, np.integer):
        rounded = np.rint(ids)
        if not np.all(ids == rounded):
            raise ValueError("instance ids must be integers")
        ids = rounded.astype(np.int64)
    grad = np.zeros_like(emb)
    labels = np.unique(ids)
    labels = labels[labels > 0]
    n_clusters = len(labels)
    if n_clusters == 0:
        return 0.0, Grid2D(grad)
    members = []
    means = []
    for lab in labels:
        rows, cols = np.nonzero(ids == lab)
        f = emb[rows, cols]
        members.append((rows, cols, f))
        means.append(f.mean(axis=0))
    means = np.stack(means)

    l_var = 0.0
    for ci, (rows, cols, f) in enumerate(members):
        n_c = len(f)
        diff = means[ci] - f
        h = np.abs(diff).sum(axis=1) - w.delta_v
        act = np.maximum(h, 0.0)
        l_var += (act ** 2).mean() / n_clusters
        g = (2.0 * act * w.alpha / (n_clusters * n_c))[:, None]
        s = np.sign(diff)
        grad[rows, cols] += -g * s
        grad[rows, cols] += (g * s).sum(axis=0) / n_c

    l_dist = 0.0
    if n_clusters > 1:
        norm = n_clusters * (n_clusters - 1)
        for a in range(n_clusters):
            for b in range(a + 1, n_clusters):
                diff = means[a] - means[b]
                h = 2.0 * w.delta_d - np.abs(diff).sum()
                if h <= 0.0:
                    continue
                l_dist += 2.0 * h * h / norm
                s = np.sign(diff)
                d_mu = (-4.0 * h * w.beta / norm) * s
                ra, ca, fa = members[a]
                rb, cb, fb = members[b]
                grad[ra, ca] += d_mu / len(fa)
                grad[rb, cb] += -d_mu / len(fb)

    loss = float(w.alpha * l_var + w.beta * l_dist)
    return loss, Grid2D(grad)


def make_direction_labels(vm: VectorMap, bev: BevConfig, n_dirs: int,
                          step_px: float, thickness=None) -> Grid2D:
    """Two-hot direction-bin labels on the raster footprint of a map.

    Each element is resampled into nodes spaced step_px * pitch apart along
    its arc; the tangent at a node is the central difference of its
    neighbors (one-sided at the ends).  Every rasterized cell takes the bin
    of its nearest node plus the opposite bin n_dirs/2 away, so heading
    ambiguity never penalizes training.  Later elements overwrite earlier
    ones on overlap, matching rasterize ids.
    """
    if n_dirs < 2 or n_dirs % 2 != 0:
        raise ValueError("n_dirs must be even and >= 2")
    if step_px <= 0.0:
        raise ValueError("step_px must be positive")
    data = np.zeros((bev.height, bev.width, n_dirs))
    half = n_dirs // 2
    for el in vm.elements:
        cells = polyline_cells(el, bev, resolve_thickness(thickness, el.class_name))
        if not cells:
            continue
        nodes = sample_polyline(el, step_px * bev.pitch)
        if len(nodes) >= 3:
            tang = np.empty_like(nodes)
            tang[1:-1] = nodes[2:] - nodes[:-2]
            tang[0] = nodes[1] - nodes[0]
            tang[-1] = nodes[-1] - nodes[-2]
        else:
            tang = np.repeat((nodes[1] - nodes[0])[None, :], len(nodes), axis=0)
        theta = np.arctan2(tang[:, 1], tang[:, 0])
        bins = np.floor(theta * n_dirs / (2.0 * np.pi) + 0.5).astype(np.int64) % n_dirs
        rows = np.array([c[0] for c in cells])
        cols = np.array([c[1] for c in cells])
        cx = bev.x_min + (rows + 0.5) * bev.pitch
        cy = bev.y_min + (cols + 0.5) * bev.pitch
        d2 = (cx[:, None] - nodes[None, :, 0]) ** 2 + (cy[:, None] - nodes[None, :, 1]) ** 2
        nearest = d2.argmin(axis=1)
        b = bins[nearest]
        data[rows, cols, :] = 0.0
        data[rows, cols, b] = 1.0
        data[rows, cols, (b + half) % n_dirs] = 1.0
    return Grid2D(data)


def direction_loss(dir_logits: Grid2D, dir_labels: Grid2D):
    """Softmax cross-entropy against 0.5/0.5 two-hot direction targets.

    Only cells with a direction label participate; background cells get an
    exactly zero gradient.
    """
    lab = dir_labels.data
    if lab.shape != dir_logits.data.shape:
        raise ValueError("direction labels do not match the logits raster")
    mask = lab.sum(axis=2) > 0.0
    return softmax_cross_entropy(dir_logits, Grid2D(lab * 0.5), mask)


def step_node(c_now, d, step: float):
    """Advance a lane node along a unit direction by a pixel step."""
    c_now = _as_float64(c_now)
    d = _as_float64(d)
    if c_now.shape != (2,) or d.shape != (2,):
        raise ValueError("step_node expects 2-d node and direction")
    if abs(float(np.hypot(d[0], d[1])) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    return c_now + step * d


# ---------------------------------------------------------------------------
# toy training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Configuration for the self-contained toy training loop."""

    steps: int = 2000
    lr: float = 3e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    embed_dim: int = 16
    step_px: float = 4.0
    nvt_hidden: int = 256
    pn_hidden: int = 64
    pn_out: int = 16
    trunk_width: int = 32
    trunk_depth: int = 3
    ct_extent: BevConfig = field(
        default_factory=lambda: BevConfig(x_min=0.5, x_max=18.5, y_min=-9.0, y_max=9.0, pitch=1.0)
    )
    tilt_warn_deg: float = 45.0


@dataclass
class ModelParams:
    view: ViewTransformParams
    pn: DenseNet
    decoder: DecoderParams
    ct_extent: BevConfig
    n_dirs: int


def init_model(rng: np.random.Generator, n_cameras: int, persp_shape: tuple,
               n_classes: int, feat_dim: int, n_dirs: int, cfg: TrainConfig) -> ModelParams:
    """Seeded model init; parameter draws happen in a fixed order."""
    hp, wp = persp_shape
    ct = cfg.ct_extent
    nets = []
    for _ in range(n_cameras):
        nets.append(DenseNet([
            init_dense_layer(rng, hp * wp, cfg.nvt_hidden, "relu"),
            init_dense_layer(rng, cfg.nvt_hidden, ct.height * ct.width, "identity"),
        ]))
    view = ViewTransformParams(nets=nets, persp_shape=(hp, wp),
                               topdown_shape=(ct.height, ct.width))
    pn = DenseNet([
        init_dense_layer(rng, feat_dim + 5, cfg.pn_hidden, "relu"),
        init_dense_layer(rng, cfg.pn_hidden, cfg.pn_out, "relu"),
    ])
    in_ch = (n_classes + 1) + cfg.pn_out
    trunk = [init_dense_layer(rng, 9 * in_ch, cfg.trunk_width, "relu")]
    for _ in range(cfg.trunk_depth - 1):
        trunk.append(init_dense_layer(rng, 9 * cfg.trunk_width, cfg.trunk_width, "relu"))
    decoder = DecoderParams(
        trunk=trunk,
        seg_head=init_dense_layer(rng, cfg.trunk_width, n_classes + 1, "identity"),
        emb_head=init_dense_layer(rng, cfg.trunk_width, cfg.embed_dim, "identity"),
        dir_head=init_dense_layer(rng, cfg.trunk_width, n_dirs, "identity"),
    )
    return ModelParams(view=view, pn=pn, decoder=decoder, ct_extent=ct, n_dirs=n_dirs)


class _WarpPlan:
    """Precomputed bilinear gather/scatter for one camera's planar warp."""

    def __init__(self, cam, src_extent: BevConfig, bev: BevConfig, tilt_warn_deg: float):
        from .geometry import planar_warp_plan

        rows, cols, valid = planar_warp_plan(cam, src_extent, bev, tilt_warn_deg)
        self.valid = valid
        self.valid_idx = np.nonzero(valid)[0]
        h, w = src_extent.height, src_extent.width
        r = rows[self.valid_idx]
        c = cols[self.valid_idx]
        r0 = np.clip(np.floor(r).astype(np.int64), 0, max(h - 2, 0))
        c0 = np.clip(np.floor(c).astype(np.int64), 0, max(w - 2, 0))
        r1 = np.minimum(r0 + 1, h - 1)
        c1 = np.minimum(c0 + 1, w - 1)
        a = r - r0
        b = c - c0
        self.flat = [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1]
        self.weights = [(1 - a) * (1 - b), (1 - a) * b, a * (1 - b), a * b]
        self.src_cells = h * w

    def gather(self, planes: np.ndarray) -> np.ndarray:
        """planes (C, src_cells) -> values (n_valid, C)."""
        out = np.zeros((len(self.valid_idx), planes.shape[0]))
        for idx, wgt in zip(self.flat, self.weights):
            out += planes[:, idx].T * wgt[:, None]
        return out

    def scatter(self, d_vals: np.ndarray) -> np.ndarray:
        """values gradient (n_valid, C) -> planes gradient (C, src_cells)."""
        d = np.zeros((self.src_cells, d_vals.shape[1]))
        for idx, wgt in zip(self.flat, self.weights):
            np.add.at(d, idx, d_vals * wgt[:, None])
        return d.T


class _SceneCache:
    """Per-scene tensors staged for the training loop."""

    def __init__(self, scene, bev: BevConfig):
        from .pillars import augment_points, voxelize_dynamic

        self.labels = scene.labels
        self.cam_planes = {
            name: grid.data.reshape(-1, grid.channels).T.copy()
            for name, grid in scene.cams.items()
        }
        index = voxelize_dynamic(scene.points, bev)
        self.pillar_inputs, _, self.pillar_groups = augment_points(index, scene.points)
        self.index = index


def _forward_scene(model: ModelParams, cache: _SceneCache, plans: dict, bev: BevConfig,
                   with_cache: bool):
    from .pillars import aggregate_pillars_cached

    n_cells = bev.height * bev.width
    n_ch = next(iter(cache.cam_planes.values())).shape[0]
    total = np.zeros((n_cells, n_ch))
    count = np.zeros(n_cells)
    cam_caches = []
    for ci, (name, planes) in enumerate(cache.cam_planes.items()):
        out, net_cache = net_forward_cached(model.view.nets[ci], planes)
        plan = plans[name]
        vals = plan.gather(out)
        total[plan.valid_idx] += vals
        count[plan.valid_idx] += 1.0
        cam_caches.append((ci, name, net_cache))
    img = total / np.maximum(count, 1.0)[:, None]
    pgrid, pn_cache, winners = aggregate_pillars_cached(
        cache.index, cache.pillar_inputs, cache.pillar_groups, model.pn
    )
    features = Grid2D(np.concatenate(
        [img.reshape(bev.height, bev.width, n_ch), pgrid.data], axis=2
    ))
    seg, emb, dirs, dec_cache = decode_bev_cached(features, model.decoder)
    fwd = {
        "seg": seg, "emb": emb, "dirs": dirs,
        "count": count, "cam_caches": cam_caches, "n_ch": n_ch,
        "pn_cache": pn_cache, "winners": winners,
        "dec_cache": dec_cache,
    }
    return fwd if with_cache else (seg, emb, dirs)


def _train_step(model: ModelParams, cache: _SceneCache, plans: dict, bev: BevConfig,
                cfg: TrainConfig):
    fwd = _forward_scene(model, cache, plans, bev, with_cache=True)
    labels = cache.labels
    seg_loss, seg_grad = softmax_cross_entropy(fwd["seg"], labels.semantic, None)
    disc_loss, disc_grad = discriminative_loss(fwd["emb"], labels.instance, cfg.weights)
    dir_loss_val, dir_grad = direction_loss(fwd["dirs"], labels.direction)

    trunk_g, head_g, d_feat = decode_bev_backward(
        model.decoder, fwd["dec_cache"], seg_grad.data, disc_grad.data, dir_grad.data
    )
    n_ch = fwd["n_ch"]
    d_img = d_feat[:, :, :n_ch].reshape(-1, n_ch)
    d_pil = d_feat[:, :, n_ch:]

    pn_grads = None
    if fwd["winners"] is not None:
        d_pts = np.zeros((len(cache.pillar_inputs), model.pn.out_size))
        chans = np.arange(model.pn.out_size)
        for (row, col), sl, arg in fwd["winners"]:
            d_pts[sl.start + arg, chans] += d_pil[row, col]
        pn_grads, _ = net_backward(model.pn, fwd["pn_cache"], d_pts)

    scale = 1.0 / np.maximum(fwd["count"], 1.0)
    view_grads = {}
    for ci, name, net_cache in fwd["cam_caches"]:
        plan = plans[name]
        d_vals = d_img[plan.valid_idx] * scale[plan.valid_idx, None]
        d_planes = plan.scatter(d_vals)
        view_grads[ci], _ = net_backward(model.view.nets[ci], net_cache, d_planes)

    losses = {
        "seg": seg_loss, "disc": disc_loss, "dir": dir_loss_val,
        "total": seg_loss + disc_loss + dir_loss_val,
    }
    return losses, {"view": view_grads, "pn": pn_grads,
                    "trunk": trunk_g, "heads": head_g}


def train_toy(dataset_dir, cfg: TrainConfig):
    """Train the toy pipeline on a synthetic dataset directory.

    Returns (model, trace) where trace holds one loss record per step.
    Scene order, initialization and updates are all driven by cfg.seed, so
    repeated runs are bit-identical.
    """
    from .synth import load_dataset

    manifest, scenes = load_dataset(dataset_dir)
    bev = manifest["bev"]
    rig = manifest["rig"]
    n_dirs = manifest["n_dirs"]
    if not scenes:
        raise ValueError("dataset has no scenes")
    first = scenes[0]
    persp = next(iter(first.cams.values()))
    n_classes = first.labels.n_classes
    feat_dim = first.points.feat_dim

    rng = np.random.default_rng(cfg.seed)
    model = init_model(rng, len(rig), (persp.height, persp.width), n_classes,
                       feat_dim, n_dirs, cfg)
    plans = {cam.name: _WarpPlan(cam, cfg.ct_extent, bev, cfg.tilt_warn_deg) for cam in rig}
    caches = [_SceneCache(s, bev) for s in scenes]

    states = {
        "pn": adam_init(model.pn.layers),
        "trunk": adam_init(model.decoder.trunk),
        "heads": adam_init([model.decoder.seg_head, model.decoder.emb_head,
                            model.decoder.dir_head]),
    }
    for ci in range(len(rig)):
        states[f"view{ci}"] = adam_init(model.view.nets[ci].layers)

    trace = []
    for step in range(cfg.steps):
        si = int(rng.integers(0, len(caches)))
        losses, grads = _train_step(model, caches[si], plans, bev, cfg)

        for ci, g in grads["view"].items():
            layers, states[f"view{ci}"] = adam_step_layers(
                model.view.nets[ci].layers, g, states[f"view{ci}"], cfg.lr)
            model.view.nets[ci] = DenseNet(layers)
        if grads["pn"] is not None:
            layers, states["pn"] = adam_step_layers(
                model.pn.layers, grads["pn"], states["pn"], cfg.lr)
            model.pn = DenseNet(layers)
        trunk, states["trunk"] = adam_step_layers(
            model.decoder.trunk, grads["trunk"], states["trunk"], cfg.lr)
        heads, states["heads"] = adam_step_layers(
            [model.decoder.seg_head, model.decoder.emb_head, model.decoder.dir_head],
            grads["heads"], states["heads"], cfg.lr)
        model.decoder = DecoderParams(trunk=trunk, seg_head=heads[0],
                                      emb_head=heads[1], dir_head=heads[2])
        trace.append({"step": step, **losses})
    return model, trace


def infer_scene(model: ModelParams, scene, rig: list, bev: BevConfig,
                tilt_warn_deg: float = 45.0):
    """Run the forward pipeline on one scene.

    Returns (seg softmax, embeddings, direction softmax) grids.
    """
    plans = {cam.name: _WarpPlan(cam, model.ct_extent, bev, tilt_warn_deg) for cam in rig}
    cache = _SceneCache(scene, bev)
    seg, emb, dirs = _forward_scene(model, cache, plans, bev, with_cache=False)
    seg_soft = _apply_activation(seg.data, "softmax")
    dir_soft = _apply_activation(dirs.data, "softmax")
    return Grid2D(seg_soft), emb, Grid2D(dir_soft)


def evaluate_segmentation(model: ModelParams, scenes, rig: list, bev: BevConfig) -> dict:
    """Aggregate per-class IoU of argmax segmentation over a scene list."""
    from .maps import CLASS_NAMES

    n_classes = len(CLASS_NAMES)
    inter = np.zeros(n_classes)
    union = np.zeros(n_classes)
    plans = {cam.name: _WarpPlan(cam, model.ct_extent, bev, 90.0) for cam in rig}
    for scene in scenes:
        cache = _SceneCache(scene, bev)
        seg, _, _ = _forward_scene(model, cache, plans, bev, with_cache=False)
        pred = seg.data.argmax(axis=2)
        gt = scene.labels.semantic.data.argmax(axis=2)
        for ci in range(n_classes):
            p = pred == ci + 1
            g = gt == ci + 1
            inter[ci] += np.sum(p & g)
            union[ci] += np.sum(p | g)
    out = {}
    for ci, name in enumerate(CLASS_NAMES):
        out[name] = float(inter[ci] / union[ci]) if union[ci] > 0 else 1.0
    return out


# ---------------------------------------------------------------------------
# parameter bundles
# ---------------------------------------------------------------------------

def save_params(out_dir, model: ModelParams, extra: dict | None = None) -> None:
    """Write a parameter bundle: one grid file per tensor plus a manifest."""
    import json

    from .io import bev_to_dict, write_grid

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    layers = {}

    def put(name, layer):
        layers[name] = {"activation": layer.activation,
                        "shape": [layer.out_size, layer.in_size]}
        write_grid(out / f"{name}.w.bvg", Grid2D(layer.weight[:, :, None]))
        write_grid(out / f"{name}.b.bvg", Grid2D(layer.bias[None, :, None]))

    for ci, net in enumerate(model.view.nets):
        for li, layer in enumerate(net.layers):
            put(f"view{ci}_l{li}", layer)
    for li, layer in enumerate(model.pn.layers):
        put(f"pn_l{li}", layer)
    for li, layer in enumerate(model.decoder.trunk):
        put(f"trunk_l{li}", layer)
    put("seg_head", model.decoder.seg_head)
    put("emb_head", model.decoder.emb_head)
    put("dir_head", model.decoder.dir_head)

    manifest = {
        "format": "bevmap-params-v1",
        "cameras": len(model.view.nets),
        "persp_shape": list(model.view.persp_shape),
        "topdown_shape": list(model.view.topdown_shape),
        "view_layers": len(model.view.nets[0].layers),
        "pn_layers": len(model.pn.layers),
        "trunk_layers": len(model.decoder.trunk),
        "n_dirs": model.n_dirs,
        "ct_extent": bev_to_dict(model.ct_extent),
        "layers": layers,
        "extra": extra or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_params(bundle_dir) -> ModelParams:
    import json

    from .io import FormatError, bev_from_dict, read_grid

    bundle = Path(bundle_dir)
    path = bundle / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.pos) from exc
    if manifest.get("format") != "bevmap-params-v1":
        raise FormatError("not a parameter bundle manifest", path)

    def get(name):
        meta = manifest["layers"][name]
        w = read_grid(bundle / f"{name}.w.bvg").data[:, :, 0]
        b = read_grid(bundle / f"{name}.b.bvg").data[0, :, 0]
        if list(w.shape) != meta["shape"]:
            raise FormatError(f"layer {name} shape mismatch", path)
        return DenseLayer(w, b, meta["activation"])

    nets = []
    for ci in range(manifest["cameras"]):
        nets.append(DenseNet([get(f"view{ci}_l{li}")
                              for li in range(manifest["view_layers"])]))
    view = ViewTransformParams(
        nets=nets,
        persp_shape=tuple(manifest["persp_shape"]),
        topdown_shape=tuple(manifest["topdown_shape"]),
    )
    pn = DenseNet([get(f"pn_l{li}") for li in range(manifest["pn_layers"])])
    decoder = DecoderParams(
        trunk=[get(f"trunk_l{li}") for li in range(manifest["trunk_layers"])],
        seg_head=get("seg_head"),
        emb_head=get("emb_head"),
        dir_head=get("dir_head"),
    )
    return ModelParams(view=view, pn=pn, decoder=decoder,
                       ct_extent=bev_from_dict(manifest["ct_extent"], path),
                       n_dirs=int(manifest["n_dirs"]))

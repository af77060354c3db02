"""Self-contained correctness suites for the ``verify`` command.

Three families of checks: finite-difference gradient checks for every
differentiable operation, equivalence of the vectorized implementations
against plain-loop reference code, and metric/loss sanity identities.
All reference code here is written with explicit loops on purpose; it must
not share machinery with the implementations it checks.
"""

from __future__ import annotations

import numpy as np

from . import image_ops, nets, objectives
from . import tensor as T
from .tensor import Tensor


def fd_gradient(fn, x, h=1e-5):
    """Central finite differences of a scalar-valued fn at array x."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def check_gradient(make_loss, x0, tol=1e-6, h=1e-5):
    """Compare backprop and finite-difference gradients; returns rel error."""
    x = Tensor(x0.astype(np.float64), requires_grad=True)
    loss = make_loss(x)
    loss.backward()
    analytic = x.grad.copy()

    def scalar(arr):
        with T.no_grad():
            return make_loss(Tensor(arr)).item()

    numeric = fd_gradient(scalar, x0, h=h)
    scale = max(float(np.max(np.abs(numeric))), 1e-6)
    return float(np.max(np.abs(analytic - numeric))) / scale


def _weighted_sum(t, rng):
    w = Tensor(rng.standard_normal(t.shape))
    return T.sum_(T.mul(t, w))


# ---------------------------------------------------------------------------
# loop reference code
# ---------------------------------------------------------------------------

def conv2d_loops(x, w, b, stride, padding):
    bs, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    xp = np.zeros((bs, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((bs, oc, oh, ow), dtype=np.float64)
    for n in range(bs):
        for o in range(oc):
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(ic):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    w[o, ci, u, v]
                                    * xp[n, ci, y * stride + u, xx * stride + v]
                                )
                    out[n, o, y, xx] = acc
    return out


def maxpool_loops(x, window, stride):
    bs, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((bs, c, oh, ow), dtype=x.dtype)
    for n in range(bs):
        for ci in range(c):
            for y in range(oh):
                for xx in range(ow):
                    out[n, ci, y, xx] = x[
                        n, ci, y * stride : y * stride + window,
                        xx * stride : xx * stride + window,
                    ].max()
    return out


def _reflect(i, n):
    while i < 0 or i >= n:
        if i < 0:
            i = -i
        if i >= n:
            i = 2 * (n - 1) - i
    return i


def sobel_loops(img):
    kx = image_ops.SOBEL_X
    ky = image_ops.SOBEL_Y
    bs, c, h, w = img.shape
    out = np.zeros_like(img, dtype=np.float64)
    for n in range(bs):
        for ci in range(c):
            for y in range(h):
                for x in range(w):
                    gx = gy = 0.0
                    for u in range(3):
                        for v in range(3):
                            yy = _reflect(y + u - 1, h)
                            xx = _reflect(x + v - 1, w)
                            gx += kx[u, v] * img[n, ci, yy, xx]
                            gy += ky[u, v] * img[n, ci, yy, xx]
                    out[n, ci, y, x] = np.sqrt(gx * gx + gy * gy + T.SQRT_EPS)
    return out


def degrade_loops(hr, kernel, scale):
    bs, c, h, w = hr.shape
    kh, kw = kernel.shape
    ct, cl = (kh - 1) // 2, (kw - 1) // 2
    blurred = np.zeros_like(hr, dtype=np.float64)
    for n in range(bs):
        for ci in range(c):
            for y in range(h):
                for x in range(w):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            yy = _reflect(y + u - ct, h)
                            xx = _reflect(x + v - cl, w)
                            acc += kernel[u, v] * hr[n, ci, yy, xx]
                    blurred[n, ci, y, x] = acc
    return np.clip(blurred[:, :, ::scale, ::scale], 0.0, 1.0)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def _gradient_checks():
    """Each entry builds a deterministic scalar function of one tensor and
    compares its backprop gradient against central differences."""
    checks = {}

    def op_check(name, make_fn, positive=False, seeds=3, shape=(2, 2, 5, 5)):
        def run():
            worst = 0.0
            for seed in range(seeds):
                rng = np.random.default_rng([7, seed, len(name)])
                x0 = rng.uniform(0.2, 1.0, shape) if positive else rng.standard_normal(shape)
                fn = make_fn(rng)  # all auxiliary randomness frozen here
                worst = max(worst, check_gradient(fn, x0))
            if worst >= 1e-6:
                raise AssertionError(f"gradient mismatch {worst:.3e} (tol 1e-6)")
        checks[f"grad.{name}"] = run

    def conv_input(rng):
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        b = Tensor(rng.standard_normal(3))
        probe = Tensor(rng.standard_normal((2, 3, 5, 5)))
        return lambda t: T.sum_(T.mul(T.conv2d(t, w, b, 1, 1), probe))
    op_check("conv2d", conv_input)

    def conv_weight(rng):
        x = Tensor(rng.standard_normal((2, 2, 5, 5)))
        probe = Tensor(rng.standard_normal((2, 3, 3, 3)))
        return lambda t: T.sum_(T.mul(T.conv2d(x, t, None, 1, 0), probe))
    op_check("conv2d_weight", conv_weight, shape=(3, 2, 3, 3))

    def pool(rng):
        probe = Tensor(rng.standard_normal((2, 2, 3, 3)))
        return lambda t: T.sum_(T.mul(T.maxpool2d(t, 2, 2), probe))
    op_check("maxpool2d", pool, shape=(2, 2, 6, 6))

    def probe_op(op):
        def make(rng):
            probe = None

            def fn(t):
                nonlocal probe
                out = op(t)
                if probe is None:
                    probe = Tensor(
                        np.random.default_rng(out.size).standard_normal(out.shape)
                    )
                return T.sum_(T.mul(out, probe))
            return fn
        return make

    op_check("leaky_relu", probe_op(lambda t: T.leaky_relu(t, 0.2)))
    op_check("depth_to_space", probe_op(lambda t: T.depth_to_space(t, 2)),
             shape=(2, 8, 3, 3))
    op_check("sqrt", probe_op(T.sqrt), positive=True)
    op_check("abs", probe_op(T.abs_))
    op_check("mean", lambda rng: T.mean)
    op_check("sum", lambda rng: T.sum_)
    op_check("softplus", probe_op(T.softplus))
    op_check("sobel_map", probe_op(image_ops.sobel_map), positive=True,
             shape=(1, 2, 6, 6))
    op_check("minmax_normalize", probe_op(image_ops.minmax_normalize),
             positive=True, shape=(2, 1, 4, 4))

    cfg = objectives.LossConfig()
    for loss_name, loss_fn in (
        ("loss_rec", objectives.loss_rec),
        ("loss_hfso", objectives.loss_hfso),
        ("loss_sr", objectives.loss_sr),
    ):
        def make(rng, loss_fn=loss_fn):
            hr = Tensor(rng.uniform(0.1, 0.9, (1, 3, 6, 6)))
            return lambda t: loss_fn(t, hr, cfg)
        op_check(loss_name, make, positive=True, seeds=2, shape=(1, 3, 6, 6))
    return checks


def _oracle_checks():
    checks = {}

    def conv():
        rng = np.random.default_rng(21)
        for _ in range(4):
            x = rng.standard_normal((2, 3, 7, 7))
            w = rng.standard_normal((4, 3, 3, 3))
            b = rng.standard_normal(4)
            got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
            want = conv2d_loops(x, w, b, 1, 1)
            if np.max(np.abs(got - want)) >= 1e-5:
                raise AssertionError("conv2d disagrees with loop reference")
    checks["oracle.conv2d"] = conv

    def pool():
        rng = np.random.default_rng(22)
        for _ in range(4):
            x = rng.standard_normal((1, 2, 6, 6))
            got = T.maxpool2d(Tensor(x), 2, 2).data
            if not np.array_equal(got, maxpool_loops(x, 2, 2)):
                raise AssertionError("maxpool2d disagrees with loop reference")
    checks["oracle.maxpool2d"] = pool

    def sobel():
        rng = np.random.default_rng(23)
        img = rng.uniform(0, 1, (1, 1, 8, 8))
        got = image_ops.sobel_map(Tensor(img)).data
        if np.max(np.abs(got - sobel_loops(img))) >= 1e-6:
            raise AssertionError("sobel_map disagrees with loop reference")
    checks["oracle.sobel_map"] = sobel

    def degrade():
        rng = np.random.default_rng(24)
        hr = rng.uniform(0, 1, (1, 3, 8, 8))
        spec = image_ops.DegradationSpec(image_ops.gaussian_kernel(3, 1.2), 2)
        got = image_ops.degrade_classical(hr, spec)
        want = degrade_loops(hr, spec.kernel, 2)
        if np.max(np.abs(got - want)) >= 1e-6:
            raise AssertionError("degrade_classical disagrees with loop reference")
    checks["oracle.degrade_classical"] = degrade

    def bicubic():
        rng = np.random.default_rng(25)
        img = rng.uniform(0, 1, (1, 3, 6, 6))
        if np.max(np.abs(image_ops.bicubic_resize(img, 1.0) - img)) >= 1e-6:
            raise AssertionError("bicubic_resize at scale 1 is not the identity")
        const = np.full((1, 3, 6, 6), 0.25)
        up = image_ops.bicubic_resize(const, 2.0)
        if np.max(np.abs(up - 0.25)) >= 1e-6:
            raise AssertionError("bicubic_resize does not preserve constants")
    checks["oracle.bicubic_resize"] = bicubic

    return checks


def _sanity_checks():
    checks = {}

    def metrics():
        rng = np.random.default_rng(31)
        a = rng.uniform(0, 1, (1, 3, 16, 16))
        b = rng.uniform(0, 1, (1, 3, 16, 16))
        if image_ops.psnr(a, a) != 100.0:
            raise AssertionError("psnr of identical images must hit the 100 dB cap")
        mse = float(np.mean((a - b) ** 2))
        if abs(image_ops.psnr(a, b) - 10 * np.log10(1 / mse)) >= 1e-9:
            raise AssertionError("psnr disagrees with the direct formula")
        if abs(image_ops.ssim(a, a) - 1.0) >= 1e-9:
            raise AssertionError("ssim of identical images must be 1")
        if abs(image_ops.ssim(a, b) - image_ops.ssim(b, a)) >= 1e-9:
            raise AssertionError("ssim must be symmetric")
    checks["sanity.metrics"] = metrics

    def losses():
        rng = np.random.default_rng(32)
        cfg = objectives.LossConfig()
        hr = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
        if objectives.loss_hfso(hr, hr, cfg).item() != 0.0:
            raise AssertionError("loss_hfso(x, x) must be exactly 0")
        sr = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
        cfg0 = objectives.LossConfig(omega=0.0)
        if objectives.loss_sr(sr, hr, cfg0).item() != objectives.loss_rec(sr, hr, cfg0).item():
            raise AssertionError("loss_sr with omega=0 must equal loss_rec")
        fake = Tensor(rng.uniform(0, 1, (1, 3, 4, 4)))
        real = Tensor(rng.uniform(0, 1, (1, 3, 4, 4)))
        cfg00 = objectives.LossConfig(beta=0.0, gamma=0.0)
        lhs = objectives.loss_kans(fake, real, sr, hr, None, cfg00).item()
        rhs = objectives.pnorm_mean(fake, real, 1).item()
        if lhs != rhs:
            raise AssertionError("loss_kans with beta=gamma=0 must equal the LR term")
    checks["sanity.losses"] = losses

    def checkpoint():
        import tempfile

        net = nets.build_kans_net(2)
        nets.init_params(net, 5)
        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/ck.kasr"
            from .trainer import TrainConfig

            nets.save_checkpoint([net], TrainConfig(), path)
            (loaded,), _ = nets.load_checkpoint(path)
            for (_, p0), (_, p1) in zip(net.parameters(), loaded.parameters()):
                if not np.array_equal(p0.data, p1.data):
                    raise AssertionError("checkpoint round trip is not bit-exact")
    checks["sanity.checkpoint"] = checkpoint

    return checks


def all_checks():
    checks = {}
    checks.update(_gradient_checks())
    checks.update(_oracle_checks())
    checks.update(_sanity_checks())
    return checks


def _sabotage(op_name):
    """Swap in a deliberately wrong backward rule; returns a restore fn."""
    if op_name == "conv2d":
        real = T.conv2d

        def broken(x, weight, bias=None, stride=1, padding=0):
            out = real(x, weight, bias, stride, padding)
            inner = out._backward
            if inner is not None:
                def corrupted():
                    out.grad = out.grad * 1.5
                    inner()
                out._backward = corrupted
            return out

        T.conv2d = broken
        return lambda: setattr(T, "conv2d", real)
    raise ValueError(f"no fault injection available for op {op_name!r}")


def run(name_filter=None, break_op=None, report=print):
    """Run the suites; returns (passed names, failed (name, message) pairs)."""
    restore = _sabotage(break_op) if break_op else None
    passed, failed = [], []
    try:
        for name, check in sorted(all_checks().items()):
            if name_filter and name_filter not in name:
                continue
            try:
                check()
            except Exception as exc:  # noqa: BLE001 - report every failure kind
                failed.append((name, str(exc)))
                report(f"FAIL {name}: {exc}")
            else:
                passed.append(name)
                report(f"ok   {name}")
    finally:
        if restore:
            restore()
    return passed, failed

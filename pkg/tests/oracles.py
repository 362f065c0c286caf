"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from mdamerge import etf, feature_align, toybench


def planar(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def haar_rotations(rng, n, d):
    """``n`` Haar-distributed rotations in SO(d) via sign-fixed QR."""
    q, r = np.linalg.qr(rng.standard_normal((n, d, d)))
    q = q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]
    flip = np.linalg.det(q) < 0
    q[flip, :, 0] *= -1
    return q


def random_skew(rng, d, scale=1.0):
    a = rng.standard_normal((d, d)) * scale
    return a - a.T


def entropy_oracle(logits):
    out = []
    for row in logits:
        m = max(row)
        e = [np.exp(v - m) for v in row]
        z = sum(e)
        out.append(-sum((x / z) * np.log(x / z) for x in e if x > 0))
    return sum(out) / len(out)


def align_oracle(features, rotations, rows, offsets, labels):
    total = 0.0
    for h, r, off, y in zip(features, rotations, offsets, labels):
        acc, n = 0.0, 0
        for hi, yi in zip(h, y):
            if np.linalg.norm(hi) == 0:
                continue
            g = r.T @ hi  # row-vector convention: (h R) as a column is Rᵀh
            g = g / np.linalg.norm(g)
            acc += float(np.sum((g - rows[off + yi]) ** 2))
            n += 1
        total += acc / n
    return total


def rel_err(analytic, numeric):
    a, b = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def gradcheck_instance(seed, d=6, batch=8, tasks=2, classes=3, d_in=5, d_h=7):
    """A small aligner with random backbone, updates, heads and batches."""
    rng = np.random.default_rng(seed)
    pre = toybench.init_backbone(d_in, d_h, d, seed)
    updates = {n: 0.3 * rng.standard_normal(pre[n].shape) for n in toybench.BACKBONE}
    batches = []
    for t in range(tasks):
        x = rng.standard_normal((batch, d_in))
        y = np.arange(batch) % classes
        head = rng.standard_normal((d, classes))
        batches.append(feature_align.TaskBatch(f"t{t}", x, y, head))
    frame = etf.build_etf(tasks * classes, d, seed)
    hp = feature_align.AlignHParams()
    aligner = feature_align.FeatureAligner(pre, updates, frame.w, batches, hp)
    lam = {n: float(v) for n, v in zip(toybench.BACKBONE, rng.uniform(0.2, 0.8, 4))}
    params_a = [random_skew(rng, d, 0.3) for _ in range(tasks)]
    return aligner, lam, params_a


def fd_lambda(fn, lam, step=1e-5):
    out = {}
    for n in lam:
        hi, lo = dict(lam), dict(lam)
        hi[n] += step
        lo[n] -= step
        out[n] = (fn(hi) - fn(lo)) / (2 * step)
    return out


def fd_skew(fn, a, step=1e-5):
    """Central differences over the free coordinates ``a[i, j]``, ``i < j``."""
    d = a.shape[0]
    g = np.zeros_like(a)
    for i in range(d):
        for j in range(i + 1, d):
            e = np.zeros_like(a)
            e[i, j], e[j, i] = step, -step
            g[i, j] = (fn(a + e) - fn(a - e)) / (2 * step)
            g[j, i] = -g[i, j]
    return g


def gradient_errors(seed):
    """Relative errors of the three analytic gradients against finite differences."""
    fa, lam, params_a = gradcheck_instance(seed)
    rotations = [feature_align.cayley(a) for a in params_a]
    labels = [t.y for t in fa.tasks]

    _, g_lam = fa.entropy_grad(lam, rotations)
    fd = fd_lambda(lambda l: fa.entropy_grad(l, rotations)[0], lam)
    ent = rel_err([g_lam[n] for n in lam], [fd[n] for n in lam])

    _, g_align = fa.align_grad(lam, params_a, labels)
    targets = fa.targets(lam, labels)
    _, g_rot = fa.rotation_grad(params_a, targets)
    al, rot = 0.0, 0.0
    for t in range(len(params_a)):
        def align_t(a, t=t):
            ps = list(params_a)
            ps[t] = a
            return fa.align_grad(lam, ps, labels)[0]

        def rot_t(a, t=t):
            ps = list(params_a)
            ps[t] = a
            return fa.rotation_grad(ps, targets)[0]

        al = max(al, rel_err(g_align[t], fd_skew(align_t, params_a[t])))
        rot = max(rot, rel_err(g_rot[t], fd_skew(rot_t, params_a[t])))
    return {"entropy/lambda": ent, "align/a": al, "rotation/a": rot}

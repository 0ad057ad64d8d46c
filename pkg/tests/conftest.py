import numpy as np
import pytest

from crowdcount import groundtruth
from crowdcount import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def numba_backend():
    """Run a test on the direct-loop reference backend, then restore."""
    prev = kernels.get_backend()
    kernels.set_backend("numba")
    yield
    kernels.set_backend(prev)


def conv2d_oracle(x, w, b, pad_h, pad_w):
    """Brute-force cross-correlation: seven nested Python loops, written
    before the kernels and kept as the independent reference."""
    n_batch, c_in, h, width = x.shape
    c_out, _, k_h, k_w = w.shape
    xp = np.zeros((n_batch, c_in, h + 2 * pad_h, width + 2 * pad_w), x.dtype)
    xp[:, :, pad_h : pad_h + h, pad_w : pad_w + width] = x
    h_out = h + 2 * pad_h - k_h + 1
    w_out = width + 2 * pad_w - k_w + 1
    y = np.empty((n_batch, c_out, h_out, w_out), x.dtype)
    for n in range(n_batch):
        for o in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    acc = b[o]
                    for c in range(c_in):
                        for u in range(k_h):
                            for v in range(k_w):
                                acc += w[o, c, u, v] * xp[n, c, i + u, j + v]
                    y[n, o, i, j] = acc
    return y


def maxpool_oracle(x):
    """Direct window scan over non-overlapping 2x2 blocks (even extents)."""
    n_batch, c_ch, h, w = x.shape
    y = np.empty((n_batch, c_ch, h // 2, w // 2), x.dtype)
    for n in range(n_batch):
        for c in range(c_ch):
            for i in range(h // 2):
                for j in range(w // 2):
                    y[n, c, i, j] = x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    return y


def sum_pool_oracle(x, f):
    n_batch, c_ch, h, w = x.shape
    y = np.zeros((n_batch, c_ch, h // f, w // f), np.float64)
    for n in range(n_batch):
        for c in range(c_ch):
            for i in range(h // f):
                for j in range(w // f):
                    y[n, c, i, j] = x[n, c, f * i : f * i + f, f * j : f * j + f].sum()
    return y


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar f over every element of x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def make_toy_dataset(tmp_path, n_images=3, size=32, seed=3, channels=3):
    """Writes PPM/PGM images + annotation JSON; returns (ann_path, img_dir)."""
    rng = np.random.default_rng(seed)
    img_dir = tmp_path / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    anns = []
    for i in range(n_images):
        if channels == 3:
            img = rng.integers(0, 256, (size, size, 3)).astype(np.uint8)
            name = f"img{i}.ppm"
            with open(img_dir / name, "wb") as f:
                f.write(b"P6\n%d %d\n255\n" % (size, size))
                f.write(img.tobytes())
        else:
            img = rng.integers(0, 256, (size, size)).astype(np.uint8)
            name = f"img{i}.pgm"
            groundtruth.write_pgm(img, img_dir / name)
        npts = int(rng.integers(3, 8))
        pts = [
            (float(rng.uniform(0, size)), float(rng.uniform(0, size)))
            for _ in range(npts)
        ]
        anns.append(groundtruth.DotAnnotation(name, pts))
    ann_path = tmp_path / "ann.json"
    groundtruth.write_annotations(anns, ann_path)
    return ann_path, img_dir

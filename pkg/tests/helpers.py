"""Shared synthetic fixtures for the post-processing and acceptance tests."""

import numpy as np


def clutter_ensemble(n_frames=40, shape=(24, 24, 24), radius=4.0, clutter_db=30.0, seed=0):
    """Static speckle everywhere plus blood speckle sliding along x inside a tube.

    Returns (frames, vessel_mask). The tissue term is identical in every frame;
    the blood term moves one voxel per frame so it decorrelates in time.
    """
    rng = np.random.default_rng(seed)
    nx, ny, nz = shape
    _, j, k = np.indices(shape)
    mask = (j - (ny - 1) / 2) ** 2 + (k - (nz - 1) / 2) ** 2 <= radius**2
    tissue = (rng.normal(size=shape) + 1j * rng.normal(size=shape)) * 10 ** (clutter_db / 20)
    blood = rng.normal(size=(nx + n_frames, ny, nz)) + 1j * rng.normal(size=(nx + n_frames, ny, nz))
    frames = [tissue + np.where(mask, blood[f:f + nx], 0) for f in range(n_frames)]
    return frames, mask


def tube_points(n, radius, length, rng, axis_offset=(0.0, 0.0, 0.0)):
    """Uniform points inside a cylinder along x centred on ``axis_offset``."""
    r = radius * np.sqrt(rng.random(n))
    phi = rng.random(n) * 2 * np.pi
    x = (rng.random(n) - 0.5) * length
    return np.column_stack([x, r * np.cos(phi), r * np.sin(phi)]) + np.asarray(axis_offset)


def reference_delay_matrix(points, tx, transducer, c, fs, fc, n_samples, t0=0.0, f_number=1.5,
                           interpolation="linear"):
    """Dense numpy construction of the DAS delay matrix, used as an oracle for the compiled builder."""
    from scipy import sparse

    from updsim.beamform import receive_aperture

    points = np.asarray(points, float).reshape(-1, 3)
    e = transducer.element_centers
    n_el = len(e)
    tau = tx.arrival_time(points, c)[:, None] + np.sqrt(((points[:, None, :] - e[None, :, :]) ** 2).sum(-1)) / c
    pos = (tau - t0) * fs
    nearest = np.rint(pos)
    pos = np.where(np.abs(pos - nearest) < 1e-9, nearest, pos)
    if interpolation == "nearest":
        pos = np.rint(pos)
    base = np.floor(pos)
    frac = pos - base
    base = base.astype(np.int64)
    keep = receive_aperture(points, e, f_number) & (pos >= 0) & (pos <= n_samples - 1)
    n_rows = int(max(n_samples, base[keep].max() + 2 if keep.any() else n_samples))
    rot = np.exp(2j * np.pi * fc * tau)
    dense = np.zeros((len(points), n_rows * n_el), complex)
    i, j = np.nonzero(keep)
    col = base[i, j] + n_rows * j
    np.add.at(dense, (i, col), ((1 - frac) * rot)[i, j])
    np.add.at(dense, (i, col + 1), (frac * rot)[i, j])
    return sparse.csr_matrix(dense), n_rows

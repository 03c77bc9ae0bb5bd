"""Input checks shared by the estimator wrappers and the command line."""

import numpy as np

from .errors import EmptyInput, LengthMismatch
from .fileio import PointCloudSequence
from .motion import FrameSequence


def check_sequences(X, n_joints=None, name="X"):
    """Return ``X`` as a list of :class:`FrameSequence`.

    A single sequence is wrapped in a list. Every sequence must use
    ``n_joints`` joints when given.
    """
    if isinstance(X, FrameSequence):
        X = [X]
    X = list(X)
    if not X:
        raise EmptyInput(f"{name} holds no sequences")
    for i, seq in enumerate(X):
        if not isinstance(seq, FrameSequence):
            raise TypeError(f"{name}[{i}] is {type(seq).__name__}, expected FrameSequence")
        if n_joints is not None and seq.n_joints != n_joints:
            raise LengthMismatch(f"{name}[{i}] has {seq.n_joints} joints, model expects {n_joints}")
        if not (np.isfinite(seq.theta).all() and np.isfinite(seq.gamma).all()):
            raise ValueError(f"{name}[{i}] contains non-finite values")
    return X


def check_point_cloud_sequences(X, name="X"):
    if isinstance(X, PointCloudSequence):
        X = [X]
    X = list(X)
    if not X:
        raise EmptyInput(f"{name} holds no point-cloud sequences")
    for i, pcs in enumerate(X):
        if not isinstance(pcs, PointCloudSequence):
            raise TypeError(f"{name}[{i}] is {type(pcs).__name__}, expected PointCloudSequence")
        if pcs.n_frames < 2:
            raise ValueError(f"{name}[{i}] needs at least two frames")
        if not all(np.isfinite(c).all() for c in pcs.clouds):
            raise ValueError(f"{name}[{i}] contains non-finite points")
    return X


def check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value

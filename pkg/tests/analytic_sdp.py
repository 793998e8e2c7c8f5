"""Small SDPs with known optima, shared by the solver tests."""

import numpy as np

from certbound import sdp

E = sdp.BlockEntries


def min_t_problem():
    """min t  s.t.  [[t, 1], [1, t]] PSD  (X = that matrix, t free)."""
    A = [E([0, 1, 2], [0, 1, 0], [0, 1, 1], [1.0, 1.0, 0.5])]
    B = np.array([[-1.0], [-1.0], [0.0]])
    return sdp.SdpProblem([2], [0.0, 0.0, 1.0], A, [np.zeros((2, 2))], B, [1.0])


def shifted_scalar_problem():
    """min x  s.t.  x - 2 >= 0  (1x1 block X = x - 2, x free)."""
    A = [E([0], [0], [0], [1.0])]
    return sdp.SdpProblem([1], [-2.0], A, [np.zeros((1, 1))], np.array([[-1.0]]), [1.0])


def max_entry_problem():
    """max X11  s.t.  trace X = 1, X PSD (as min -X11)."""
    A = [E([0, 0], [0, 1], [0, 1], [1.0, 1.0])]
    return sdp.SdpProblem([2], [1.0], A, [np.diag([-1.0, 0.0])], np.zeros((1, 0)), [])


ANALYTIC = [(min_t_problem, 1.0), (shifted_scalar_problem, 2.0), (max_entry_problem, -1.0)]

"""Prints reference values frozen into test_numkernel.cpp and test_sinks.cpp.

Computed with numpy in float64, independently of the C++ code.
"""
import numpy as np

def softmax(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()

def log_softmax(v):
    v = np.asarray(v, dtype=np.float64)
    m = v.max()
    return v - m - np.log(np.exp(v - m).sum())

def rms_norm(x, gain, eps):
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(np.mean(x * x) + eps) * np.asarray(gain, dtype=np.float64)

def show(name, arr):
    print(name, "{" + ", ".join("%.17g" % a for a in np.atleast_1d(arr)) + "}")

show("softmax_a", softmax([1.5, -0.25, 3.0, 0.0, -2.0]))
show("log_softmax_a", log_softmax([1.5, -0.25, 3.0, 0.0, -2.0]))
show("softmax_b", softmax([1000.0, 1000.0, 999.0]))
show("rms_a", rms_norm([0.5, -1.25, 2.0, 4.0], [1.0, 0.5, 2.0, -1.0], 1e-6))
show("rms_b", rms_norm([30.0, -0.1, 0.2, 0.05, -0.3, 0.1], np.ones(6), 1e-6))

vals = [0.91, -0.42, 0.13, 0.77, -0.88, 0.05, 0.6]
q1, med, q3 = np.percentile(vals, [25, 50, 75])
show("quantiles", [q1, med, q3])
show("mds_stats", [med, q3 - q1, np.std(vals)])
show("p99", np.percentile(np.arange(1, 101, dtype=np.float64) ** 1.5, 99))

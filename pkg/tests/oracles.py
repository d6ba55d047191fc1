"""Independent reference implementations used as test oracles."""

import math


def reference_lamb(ws, gs_per_step, lr, b1=0.9, b2=0.999, eps=1e-6, wd=0.0):
    """Scalar-loop LAMB over flat python lists, one tensor."""
    w = list(ws)
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t, gs in enumerate(gs_per_step, start=1):
        r = []
        for k in range(len(w)):
            m[k] = b1 * m[k] + (1 - b1) * gs[k]
            v[k] = b2 * v[k] + (1 - b2) * gs[k] * gs[k]
            mh = m[k] / (1 - b1 ** t)
            vh = v[k] / (1 - b2 ** t)
            r.append(mh / (math.sqrt(vh) + eps) + wd * w[k])
        wn = math.sqrt(sum(x * x for x in w))
        rn = math.sqrt(sum(x * x for x in r))
        trust = wn / rn if wn > 0 and rn > 0 else 1.0
        w = [w[k] - lr * trust * r[k] for k in range(len(w))]
    return w

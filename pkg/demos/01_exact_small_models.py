"""Exact computations on models small enough to enumerate.

With a handful of hidden units the partition function is a finite sum, so
the likelihood, its gradient and the stationary distribution of the Gibbs
chain can all be computed exactly and compared with what training and
sampling actually do.
"""

import numpy as np

from agetrbm import grbm, trbm
from agetrbm.grbm import GrbmHyper, GrbmParams
from agetrbm.trbm import FaceSequence, ReferenceWindow, Transitions, TrbmParams


def main():
    rng = np.random.default_rng(0)

    # A temporal model over 4 visible and 3 hidden units.
    p = TrbmParams.initialize(4, 3, rng, weight_init_std=0.3)
    p = p.replace(A=rng.normal(0, 0.3, (3, 4)), B=rng.normal(0, 0.3, (4, 4)),
                  P=rng.normal(0, 0.3, (2, 4, 4)), Q=rng.normal(0, 0.3, (2, 4, 3)))
    seq = FaceSequence(rng.normal(size=(4, 4)), (0, 1, 2, 3))
    refs = [ReferenceWindow(rng.normal(size=4), rng.normal(size=4)) for _ in range(3)]
    report = trbm.sequence_log_likelihood(seq, refs, p)
    print("per-step log-likelihoods:", np.round(report.per_step, 4))

    # Central differences against the enumerated gradient, one entry of B.
    grad = trbm.exact_gradient(Transitions.from_sequences([seq], [refs]), p)
    eps = 1e-6
    up, dn = p.B.copy(), p.B.copy()
    up[1, 2] += eps
    dn[1, 2] -= eps
    fd = (trbm.sequence_log_likelihood(seq, refs, p.replace(B=up)).total
          - trbm.sequence_log_likelihood(seq, refs, p.replace(B=dn)).total) / (2 * eps)
    print(f"dL/dB[1,2]: exact {grad['B'][1, 2]:.8f}  finite difference {fd:.8f}")

    # Zero conditioning weights turn the temporal model into a plain GRBM.
    g = GrbmParams(W=p.W, b=p.b, a=p.a, sigma2=p.sigma2)
    flat = TrbmParams.from_grbm(g)
    ll = trbm.step_log_likelihood(seq.frames[1], seq.frames[0], refs[0], flat)[0]
    print("static model agrees with GRBM:", ll == grbm.exact_log_likelihood(seq.frames[1], g))

    # CD-1 points roughly along the exact gradient.
    data = rng.normal(0, 1.5, (50, 3)) + rng.normal(0, 1, 3)
    small = GrbmParams.initialize(3, 3, rng)
    cd = grbm.cd_statistics(data, small, 1, rng)
    ex = grbm.exact_gradient(data, small)
    flat_cd = np.concatenate([cd[k].ravel() for k in ex])
    flat_ex = np.concatenate([ex[k].ravel() for k in ex])
    cos = flat_cd @ flat_ex / np.linalg.norm(flat_cd) / np.linalg.norm(flat_ex)
    print(f"cosine(CD-1, exact gradient) = {cos:.3f}")

    # A few epochs of CD raise the exact likelihood.
    before = grbm.exact_log_likelihood(data, small).mean()
    trained = grbm.train(data, 3, GrbmHyper(learning_rate=0.01, epochs=50, batch_size=10),
                         p0=small, rng=rng)
    after = grbm.exact_log_likelihood(data, trained).mean()
    print(f"mean log-likelihood: {before:.3f} -> {after:.3f}")


if __name__ == "__main__":
    main()

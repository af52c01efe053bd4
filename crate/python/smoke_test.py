"""Smoke test for the entirec_py extension.

Build and install first:  pip install -e crates/py --no-build-isolation
Then run:                 python3 python/smoke_test.py
"""

import math
import os
import random
import tempfile

import entirec_py as ec


def mnrl_reference(q, e, scale):
    n = len(q)
    loss = 0.0
    for i in range(n):
        s = [scale * sum(a * b for a, b in zip(q[i], col)) for col in e]
        m = max(s)
        lse = m + math.log(sum(math.exp(x - m) for x in s))
        loss += lse - s[i]
    return loss / n


def check_losses():
    rng = random.Random(7)
    q = [[rng.gauss(0, 1) for _ in range(4)] for _ in range(3)]
    e = [[rng.gauss(0, 1) for _ in range(4)] for _ in range(5)]
    loss, dq, de = ec.loss_mnrl(q, e, 2.0)
    assert abs(loss - mnrl_reference(q, e, 2.0)) < 1e-9, loss
    h = 1e-6
    for i in range(3):
        for k in range(4):
            qp = [row[:] for row in q]
            qm = [row[:] for row in q]
            qp[i][k] += h
            qm[i][k] -= h
            fd = (mnrl_reference(qp, e, 2.0) - mnrl_reference(qm, e, 2.0)) / (2 * h)
            assert abs(fd - dq[i][k]) < 1e-5, (i, k, fd, dq[i][k])
    assert len(de) == 5

    assert abs(ec.loss_mnrl([[1, 0], [0, 1]], [[1, 0], [0, 1]], 1.0)[0] - math.log(1 + math.exp(-1))) < 1e-12
    l, _ = ec.loss_contrastive_domain([[1, 0], [0, 1]], [(0, 1, False)], 0.75)
    assert l == 0.0
    try:
        ec.loss_mnrl([[1.0]], [[1.0]], 1.0)
    except ec.EntirecError as err:
        assert "DegenerateBatch" in str(err)
    else:
        raise AssertionError("single-row batch accepted")


def check_pipeline():
    corpus = ec.generate_corpus(n_users=40, n_sessions=400, seed=42)
    train, test = corpus.sessions.split(0.2)
    assert len(train) + len(test) == len(corpus.sessions)

    weights, curve = ec.train(train, variant="CC", epochs=2, batch_size=64)
    assert weights.version == 1
    assert curve and all(len(r) == 4 for r in curve)

    index = ec.Index.build(corpus).refreshed(weights)
    assert index.n_users > 0 and index.n_entities > 0

    gate = ec.calibrate_gate(weights, index, train, variant="CC")
    report = ec.evaluate(weights, index, test, gate=gate, variant="CC")
    assert report["n_samples"] == len(test)
    assert 0.0 <= report["em_overall"] <= 1.0
    print("CC on {} test sessions at {!r}: EM {:.3f}".format(len(test), gate, report["em_overall"]))

    s = test.to_list()[0]
    src = s["turns"][-2]
    ctx = [(t["query"], t["response"], t["ts"]) for t in s["turns"][:-2]]
    d = ec.correct(s["user"], src["query"], index, weights, context=ctx, gate=gate, variant="CC")
    assert d["reason"] in {"Triggered", "BelowTau1", "AmbiguousTop2", "NoCandidates", "NoMention"}
    cold = ec.correct("nobody", "play scars", index, weights)
    assert cold["reason"] == "NoCandidates" and not cold["triggered"]

    with tempfile.TemporaryDirectory() as tmp:
        wp, ip, sp = (os.path.join(tmp, n) for n in ("w.bin", "i.bin", "s.jsonl"))
        weights.save(wp)
        index.save(ip)
        test.save(sp)
        w2, i2, t2 = ec.Weights.load(wp), ec.Index.load(ip), ec.Sessions.load(sp)
        assert w2.encode("play scars") == weights.encode("play scars")
        assert ec.evaluate(w2, i2, t2, gate=gate, variant="CC") == report


if __name__ == "__main__":
    check_losses()
    check_pipeline()
    print("smoke test ok")

"""Smoke test for the aesim_py extension module.

Build the module first:
    cargo build -p aesim-py --release --features extension-module
Then run:
    python python/smoke_test.py
"""

import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    """Import aesim_py from the cargo build output."""
    libdir = os.path.join(ROOT, "target", "release")
    src = os.path.join(libdir, "libaesim_py.so")
    dst = os.path.join(libdir, "aesim_py.so")
    if os.path.exists(src) and not os.path.exists(dst):
        shutil.copyfile(src, dst)
    sys.path.insert(0, libdir)
    import aesim_py

    return aesim_py


def main():
    m = load_module()

    # World generation is deterministic under a seed.
    cat = m.Catalog.generate(200, 5, [3, 4], 4, seed=11)
    assert cat.n_items == 200 and cat.n_categories == 5
    feats = cat.item_features(cat.item_ids()[0])
    assert len(feats) == cat.feature_width

    oracle = m.Oracle.generate(cat, user_dim=6, max_positions=10, seed=12)
    user, query = oracle.sample_user(seed=13)
    assert len(user) == 6 and 0 <= query < 5
    assert oracle.sample_user(seed=13) == (user, query)

    # Examination curve is 1/log2(k+1).
    for k in (1, 2, 5, 10):
        assert abs(oracle.examination_at(k) - 1.0 / math.log2(k + 1)) < 1e-12

    # Expected feedback factorizes: p at position k scales with e(k).
    display = cat.item_ids()[:5]
    clicks, purchases = oracle.expected_feedback(cat, user, display)
    assert len(clicks) == len(purchases) == 5
    assert all(0.0 <= c <= 1.0 for c in clicks)
    assert all(p <= c + 1e-12 for c, p in zip(clicks, purchases))
    rel = oracle.relevance(cat, user, display[0])
    assert 0.0 <= rel <= 1.0

    # Metrics agree with hand values.
    assert m.auc([0.9, 0.8, 0.1], [1.0, 0.0, 0.0]) == 1.0
    assert abs(m.auc([0.5, 0.5], [1.0, 0.0]) - 0.5) < 1e-12
    g, used, skipped = m.gauc([([0.9, 0.1], [1.0, 0.0]), ([0.2, 0.8], [1.0, 1.0])])
    assert g == 1.0 and used == 1 and skipped == 1
    assert abs(m.ndcg([3.0, 2.0, 1.0], [1.0, 0.0, 1.0], 3) - (1.0 + 0.5) / (1.0 + 1.0 / math.log2(3))) < 1e-12
    assert abs(m.average_precision([0.9, 0.8, 0.1], [0.0, 1.0, 1.0]) - 0.5 * (0.5 + 2.0 / 3.0)) < 1e-12

    # The swap probe on the exact oracle recovers the examination curve.
    p = m.oracle_bias_probe(oracle, cat, n_sessions=30, max_k=8, seed=14)
    for k in range(1, 9):
        assert abs(p[k - 1] - oracle.examination_at(k)) < 1e-9

    # One pipeline stage end to end through the TOML config layer.
    tmp = tempfile.mkdtemp(prefix="aesim-py-")
    try:
        config = os.path.join(tmp, "exp.toml")
        with open(os.path.join(ROOT, "configs", "smoke.toml")) as f:
            text = f.read()
        text = text.replace('out_dir = "runs/smoke"', f'out_dir = "{tmp}/run"')
        with open(config, "w") as f:
            f.write(text)
        m.run_stage(config, "gen-world")
        assert os.path.exists(os.path.join(tmp, "run", "world", "catalog.jsonl"))
        cat2 = m.Catalog.load(os.path.join(tmp, "run", "world", "catalog.jsonl"))
        assert cat2.n_items == 2000
        oracle2 = m.Oracle.load(os.path.join(tmp, "run", "world", "oracle.json"))
        assert oracle2.user_dim == 8
    finally:
        shutil.rmtree(tmp)

    print("aesim_py smoke test: all checks passed")


if __name__ == "__main__":
    main()

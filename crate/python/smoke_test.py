"""Smoke test for the longctx Python bindings.

Build first:  pip install --no-build-isolation -e crates/python
Run:          python python/smoke_test.py
"""

import json
import math

import longctx_py as lc


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(b))


def check_rotary():
    basis = lc.FrequencyBasis(128, 10000.0)
    assert basis.angles[0] == 1.0
    assert close(basis.angles[63], 10000.0 ** (-126 / 128))
    v = [0.1 * i for i in range(128)]
    assert close(sum(x * x for x in basis.apply(1000, v)), sum(x * x for x in v), 1e-12)
    # Text tokens get identical components, so M-RoPE reduces to RoPE.
    assert basis.apply_mrope((7, 7, 7), v) == basis.apply(7, v)
    r = basis.rotation_matrix(3)
    assert len(r) == 128 and close(r[0][0], math.cos(3.0))


def check_extension():
    plan = lc.extend("mropepp", head_dim=128, base=10000.0, orig_len=16384, target_len=131072)
    assert plan.scale == 8.0
    rows = plan.rows()
    assert len(rows) == 64
    assert all(a == b for seg, a, b in rows if seg == "temporal")
    assert all(close(b, a / 8) for seg, a, b in rows if seg == "width")
    pi = lc.extend("pi", head_dim=64, orig_len=4096, target_len=8192)
    assert pi.scaled_angles == [a / 2 for a in pi.original_angles]
    assert lc.recommend_base(131072) == 500000.0
    table = json.loads(lc.base_table_json())
    assert [m["videomme_long"] for m in table["measurements"]] == [39.5, 43.2, 43.1]
    assert [s for _, _, s in lc.progressive_schedule([8192, 32768, 65536, 131072])] == [1, 4, 2, 2]


def check_positions():
    pos = lc.assign_positions("text:2,image:2x2,text:1")
    assert pos == [(0, 0, 0), (1, 1, 1), (2, 2, 2), (2, 2, 3), (2, 3, 2), (2, 3, 3), (4, 4, 4)]
    assert lc.assign_positions([("text", 2), ("image", 2, 2), ("text", 1)]) == pos


def check_attention():
    x = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    eye = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]
    weights, out = lc.attention(x, eye, eye, eye, [0, 1, 2], mode="rope")
    assert all(close(sum(row), 1.0, 1e-12) for row in weights)
    assert len(out) == 3 and len(out[0]) == 4


def check_haystack():
    curve = lc.haystack_curve([1, 8, 32], method="mropepp", tokens_per_item=16, trials=50)
    assert curve[0] == (1, 1.0)
    assert lc.haystack_curve([8, 32], tokens_per_item=16, trials=50) == curve[1:]
    assert lc.effective_length([(10, 0.9), (50, 0.65), (100, 0.55)], 0.6) == 50


def check_packing():
    def sample(i, n):
        return {
            "id": i,
            "category": "video",
            "token_len": n,
            "turns": [
                {"role": "user", "content": "describe " + i, "attachments": 1},
                {"role": "assistant", "content": "ok"},
            ],
        }

    samples = [sample("a", 6000), sample("b", 5000), sample("c", 4000), sample("d", 3000)]
    manifest = lc.pack(samples, 8192)
    assert [p["sample_ids"] for p in manifest["packs"]] == [["a"], ["b", "d"], ["c"]]
    text = lc.serialize_chatml(manifest["packs"][1], samples)
    turns = lc.parse_chatml(text)
    assert [t["role"] for t in turns] == ["user", "assistant"] * 2
    assert [t["attachments"] for t in turns] == [1, 0, 1, 0]
    sel = lc.sample_corpus(samples, 10000, seed=3)
    assert sel["total_tokens"] <= 10000 and sel["warnings"]
    try:
        lc.pack([{"id": "x", "category": "video", "token_len": 0, "turns": []}], 10)
    except ValueError:
        pass
    else:
        raise AssertionError("invalid sample accepted")


def check_hybrid():
    plan = lc.plan_hybrid(1024, group_size=4, hi_res_tokens=240, compression=3)
    assert plan["total_tokens"] == 122880 and plan["avg_tokens_per_frame"] == 120.0
    rows = lc.tradeoff(122880, [128, 256, 512, 768, 1024])
    assert [t for _, t in rows] == [960, 480, 240, 160, 120]


def main():
    checks = [check_rotary, check_extension, check_positions, check_attention,
              check_haystack, check_packing, check_hybrid]
    for check in checks:
        check()
        print("ok", check.__name__)
    print("all %d checks passed" % len(checks))


if __name__ == "__main__":
    main()

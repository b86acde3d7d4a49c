"""Smoke test for the alignlab_py extension.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/alignlab_py-*.whl
"""

import math
import sys

import alignlab_py as al


def check(name, ok, detail=""):
    print(f"{'ok  ' if ok else 'FAIL'} {name} {detail}")
    return ok


def main():
    results = []

    grid = al.shipped_map()
    oracle = al.value_iteration(grid)
    path = grid.shortest_path()
    results.append(check("oracle converges", oracle.sweeps < 1000 and oracle.fixed_point_residual(grid) < 1e-9,
                         f"sweeps={oracle.sweeps}"))
    results.append(check("bfs path reaches gift", path is not None and len(path) > 1, f"{path}"))
    results.append(check("parse round trip", al.parse_grid(grid.to_ascii()).to_ascii() == grid.to_ascii()))
    try:
        al.parse_grid("SX\nFG")
        results.append(check("bad map rejected", False))
    except ValueError as e:
        results.append(check("bad map rejected", True, str(e)))

    results.append(check("counting identity", sum(al.propagation_weights([1.0] * 5, 1.0)) == 15.0))

    model = al.Model.tiny_decoder(6, 8, 8, 8, 3)
    reference = al.Model.tiny_decoder(6, 8, 8, 8, 4)
    tokens, neg = [2, 3, 4, 5, 0], [2, 3, 5, 4, 0]
    sft = al.sft_loss(model, tokens, 2)
    ift_off = al.ift_loss(model, tokens, 2, ["lambda=0", "propagation=off"])
    ift = al.ift_loss(model, tokens, 2)
    results.append(check("sft degeneracy", abs(sft.total - ift_off.total) <= 1e-9,
                         f"sft={sft.total:.6f} ift={ift.total:.6f}"))
    results.append(check("bellman identity", max(ift.bellman_residual) <= 1e-9))
    results.append(check("distribution sums to one", abs(sum(model.next_distribution([2, 3])) - 1.0) < 1e-9))
    dpo = al.dpo_loss(model, reference, tokens, neg, 2)
    orpo = al.orpo_loss(model, tokens, neg, 2)
    results.append(check("pairwise losses finite", math.isfinite(dpo.total) and math.isfinite(orpo.total),
                         f"dpo={dpo.total:.6f} orpo={orpo.total:.6f}"))

    train, held_out = al.generate_corpus(train_size=20, eval_size=5)
    results.append(check("corpus", len(train) == 20 and len(held_out) == 5, f"first={train[0]}"))

    echo, digest = al.load_config("", ["toylm.epochs=3"])
    results.append(check("config echo", "epochs = 3" in echo or "epochs=3" in echo, digest[:12]))
    try:
        al.load_config("", ["lambda=1.5"])
        results.append(check("bad lambda rejected", False))
    except ValueError as e:
        results.append(check("bad lambda rejected", True, str(e)))

    grads = al.gradient_suite(3, 1)
    results.append(check("gradient suite", all(c[4] for c in grads), f"worst={max(c[3] for c in grads):.2e}"))
    props = al.property_suites(20, 1)
    results.append(check("property suites", all(s[4] for s in props)))

    csv, line, passed = al.run_frozenlake("", ["seeds=2", "frozenlake.methods=sft,ift"])
    results.append(check("frozen lake run", csv.startswith("method,seed,mse,coverage,steps") and csv.count("\n") == 5,
                         line))
    csv, line, _ = al.run_toylm("", ["seeds=1", "toylm.epochs=2", "toylm.train_size=20", "toylm.eval_size=5"])
    results.append(check("toy run", csv.count("\n") == 3, line))

    print(f"{sum(results)}/{len(results)} checks passed")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())

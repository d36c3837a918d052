"""Smoke test for the cotsat Python module.

Build and install it first, for example:

    pip install maturin
    maturin build --release -m crates/cotsat-py/Cargo.toml -o dist
    pip install dist/cotsat-*.whl
"""

import tempfile

import cotsat

EXAMPLE = [[-2, -4, -1], [3, 4, -1], [-1, -3, -2], [1, -2, -4], [-4, 2, 1], [1, -2, 4]]


def main():
    n, clauses = cotsat.parse_dimacs(cotsat.emit_dimacs(4, EXAMPLE))
    assert (n, clauses) == (4, EXAMPLE)
    assert cotsat.prompt(4, EXAMPLE) == (
        "[BOS] -2 -4 -1 0 3 4 -1 0 -1 -3 -2 0 1 -2 -4 0 -4 2 1 0 1 -2 4 0 [SEP]"
    )
    assert cotsat.brute_force(4, EXAMPLE) == "SAT"

    verdict, reference = cotsat.dpll(4, EXAMPLE)
    assert verdict == "SAT"

    model = cotsat.Model.compile(4)
    assert model.dims["n_layers"] == 7 and model.dims["n_heads"] == 5
    trace, answer = model.solve(4, EXAMPLE)
    assert answer == "SAT" and trace == reference, trace
    assert cotsat.validate(cotsat.prompt(4, EXAMPLE), trace) is None

    bad = cotsat.validate(cotsat.prompt(4, EXAMPLE), "D 2 D 1 -4 3 [BT] D 2 D -1 -4 [BT] -2 D 3 D 4 -1 SAT")
    assert bad is not None and bad[0] == 9, bad

    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        again = cotsat.Model.load(d)
        assert again.logits(cotsat.prompt(4, EXAMPLE)) == model.logits(cotsat.prompt(4, EXAMPLE))

    data = cotsat.generate("marginal", 4, 20, seed=1)
    correct = 0
    for inst in data:
        _, label = model.solve(inst["num_vars"], inst["clauses"])
        correct += label == inst["label"]
    assert correct == len(data), f"{correct}/{len(data)}"
    print(f"ok: worked-example trace {trace}; {correct}/{len(data)} marginal instances correct")


if __name__ == "__main__":
    main()

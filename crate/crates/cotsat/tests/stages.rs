mod common;

use common::{example, stage_traces};
use cotsat::dpll::{solve_with_trace, ModelMirror};
use cotsat::instance_gen::{generate, Distribution, GenSpec};
use cotsat::vocab::{parse_token_string, token_string};

#[test]
fn example_formula_decodes_identically_at_every_stage() {
    let traces = stage_traces(4, &[example()]);
    let t = &traces[0];
    assert!(t.agree(), "{}", t.describe());
    assert_eq!(t.compiled, parse_token_string("D -2 D 1 D 3 SAT").unwrap());
}

#[test]
fn stages_agree_with_each_other_and_the_mirrored_solver() {
    let data = generate(&GenSpec::new(Distribution::Random, 6, 12, 41)).unwrap();
    let formulas: Vec<_> = data.iter().map(|i| i.formula.clone()).collect();
    for (f, t) in formulas.iter().zip(stage_traces(6, &formulas)) {
        assert!(t.agree(), "{}", t.describe());
        let (_, reference) = solve_with_trace(f, &ModelMirror);
        assert_eq!(
            token_string(&t.compiled),
            token_string(&reference.generated),
            "compiled model departs from the reference solver"
        );
    }
}

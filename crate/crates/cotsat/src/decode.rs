//! Greedy decoding over anything that produces next-token logits.
//!
//! The abstract evaluator, the reduced-graph evaluator and the compiled
//! model all implement [`NextTokenLogits`], so one loop drives all three.

use crate::dsl::{argmax, top_margin};

/// An incremental next-token scorer.
pub trait NextTokenLogits {
    type Error;

    /// Appends a token to the running sequence.
    fn push_token(&mut self, token: usize) -> Result<(), Self::Error>;

    /// Logits at the last pushed position.
    fn logits(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeHalt {
    /// A stop token was generated; it is the last generated token.
    Stopped(usize),
    /// `max_steps` tokens were generated without a stop token.
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<usize>,
    pub generated: Vec<usize>,
    /// Top-1 minus top-2 logit at each generation step.
    pub margins: Vec<f64>,
    pub halt: DecodeHalt,
}

/// Feeds `prompt`, then repeatedly appends the argmax token (lowest id on
/// ties) until a token in `stop` appears or `max_steps` tokens were made.
pub fn greedy_decode<M: NextTokenLogits>(
    model: &mut M,
    prompt: &[usize],
    stop: &[usize],
    max_steps: usize,
) -> Result<Decoded, M::Error> {
    for &t in prompt {
        model.push_token(t)?;
    }
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::new();
    let mut margins = Vec::new();
    let mut halt = DecodeHalt::BudgetExhausted;
    for step in 0..max_steps {
        let logits = model.logits();
        let next = argmax(&logits);
        margins.push(top_margin(&logits));
        tokens.push(next);
        generated.push(next);
        if stop.contains(&next) {
            halt = DecodeHalt::Stopped(next);
            break;
        }
        if step + 1 < max_steps {
            model.push_token(next)?;
        }
    }
    Ok(Decoded {
        tokens,
        generated,
        margins,
        halt,
    })
}

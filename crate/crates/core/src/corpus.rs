//! Seeded arithmetic prompt corpus with ground truth.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calc::Operation;

pub const OPERAND_MIN: u32 = 1;
pub const OPERAND_MAX: u32 = 999;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithPrompt {
    pub text: String,
    pub operation: String,
    pub operands: Vec<u32>,
    pub arity: usize,
}

impl ArithPrompt {
    pub fn expected(&self) -> BigInt {
        let op = Operation::from_name(&self.operation).expect("generated operation");
        let xs: Vec<BigInt> = self.operands.iter().map(|&x| BigInt::from(x)).collect();
        op.apply(&xs).expect("arity is at least one")
    }
}

/// "1, 2 and 3"
fn listed(xs: &[String]) -> String {
    match xs {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn render(op: Operation, template: usize, xs: &[String]) -> String {
    match (op, template % 4) {
        (Operation::Add, 0) => format!("Add {}.", xs.join(" to ")),
        (Operation::Add, 1) => format!("Would you add {}?", listed(xs)),
        (Operation::Add, 2) => format!("What is {}?", xs.join(" plus ")),
        (Operation::Add, _) => format!("What is the sum of {}?", listed(xs)),
        (Operation::Subtract, 0 | 2) => format!("What is {}?", xs.join(" minus ")),
        (Operation::Subtract, _) => format!("Compute {}.", xs.join(" minus ")),
        (Operation::Multiply, 0) => format!("Multiply {}.", xs.join(" by ")),
        (Operation::Multiply, 1) => format!("What is {}?", xs.join(" times ")),
        (Operation::Multiply, _) => format!("What is the product of {}?", listed(xs)),
    }
}

/// `n_per_arity` prompts for each arity, in the order given. Operands are
/// uniform in `[1, 999]`; operation and phrasing vary per prompt.
pub fn generate_corpus(arities: &[usize], n_per_arity: usize, seed: u64) -> Vec<ArithPrompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(arities.len() * n_per_arity);
    for &arity in arities {
        let arity = arity.max(1);
        for _ in 0..n_per_arity {
            let op = Operation::ALL[rng.random_range(0..Operation::ALL.len())];
            let template = rng.random_range(0..4);
            let operands: Vec<u32> = (0..arity)
                .map(|_| rng.random_range(OPERAND_MIN..=OPERAND_MAX))
                .collect();
            let rendered: Vec<String> = operands.iter().map(|x| x.to_string()).collect();
            out.push(ArithPrompt {
                text: render(op, template, &rendered),
                operation: op.name().into(),
                operands,
                arity,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::number_literals;
    use proptest::prelude::*;

    #[test]
    fn deterministic() {
        assert_eq!(generate_corpus(&[2], 1, 42), generate_corpus(&[2], 1, 42));
        assert_ne!(generate_corpus(&[5], 10, 1), generate_corpus(&[5], 10, 2));
    }

    #[test]
    fn arity_twenty_has_twenty_numbers() {
        for p in generate_corpus(&[20], 50, 7) {
            assert_eq!(number_literals(&p.text).len(), 20, "{}", p.text);
        }
    }

    #[test]
    fn includes_would_you_add_family() {
        let c = generate_corpus(&[2], 100, 3);
        assert!(c.iter().any(|p| p.text.starts_with("Would you add ") && p.text.ends_with('?')));
        assert!(c.iter().any(|p| p.text.starts_with("Add ") && p.text.contains(" to ")));
    }

    #[test]
    fn rendering() {
        let xs = ["5", "3", "2"].map(String::from);
        assert_eq!(render(Operation::Add, 0, &xs), "Add 5 to 3 to 2.");
        assert_eq!(render(Operation::Add, 1, &xs[..2]), "Would you add 5 and 3?");
        assert_eq!(render(Operation::Multiply, 3, &xs), "What is the product of 5, 3 and 2?");
    }

    #[test]
    fn expected_value() {
        let p = ArithPrompt {
            text: String::new(),
            operation: "subtract".into(),
            operands: alloc::vec![10, 3, 2],
            arity: 3,
        };
        assert_eq!(p.expected(), BigInt::from(5));
    }

    proptest! {
        #[test]
        fn text_renders_operands_in_order(seed in any::<u64>(), arity in 1usize..25) {
            for p in generate_corpus(&[arity], 3, seed) {
                prop_assert_eq!(p.arity, p.operands.len());
                prop_assert!(p.operands.iter().all(|x| (OPERAND_MIN..=OPERAND_MAX).contains(x)));
                let shown: Vec<u32> = number_literals(&p.text).iter().map(|s| s.parse().unwrap()).collect();
                prop_assert_eq!(&shown, &p.operands);
            }
        }
    }
}

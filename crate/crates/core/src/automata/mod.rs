//! Character-level automata used to mask decoding and to reason about
//! regex domains statically.

mod dfa;
mod mask;
mod regex;
mod stream;
mod suffix;

pub use self::dfa::{Dfa, RegexError};
pub use self::mask::{allowed_tokens, MaskState};
pub use self::regex::{parse_regex, Node as RegexNode};
pub use self::stream::{Segmenter, StreamEvent, StreamGuard, ViolationPolicy};
pub use self::suffix::SuffixAutomaton;

/// A deterministic automaton over `char`. A missing transition rejects.
pub trait Automaton: Send + Sync {
    fn start(&self) -> usize;

    fn step(&self, state: usize, c: char) -> Option<usize>;

    fn is_accepting(&self, state: usize) -> bool;

    /// Whether some continuation from `state` can still be accepted.
    fn is_live(&self, state: usize) -> bool {
        let _ = state;
        true
    }

    fn walk(&self, state: usize, text: &str) -> Option<usize> {
        text.chars().try_fold(state, |s, c| self.step(s, c))
    }

    fn accepts(&self, text: &str) -> bool {
        self.walk(self.start(), text)
            .is_some_and(|s| self.is_accepting(s))
    }
}

use super::Automaton;

/// Indices of vocabulary entries whose every character can be consumed
/// from `state`. Empty entries are never allowed.
pub fn allowed_tokens<S: AsRef<str>>(
    automaton: &dyn Automaton,
    state: usize,
    vocabulary: &[S],
) -> Vec<usize> {
    vocabulary
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let t = t.as_ref();
            !t.is_empty() && automaton.walk(state, t).is_some()
        })
        .map(|(i, _)| i)
        .collect()
}

/// Decoding position inside an automaton, with checkpoints to roll back to.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub state: usize,
    pub prefix: String,
    checkpoints: Vec<(usize, usize)>,
}

impl MaskState {
    pub fn new(automaton: &dyn Automaton) -> Self {
        MaskState {
            state: automaton.start(),
            prefix: String::new(),
            checkpoints: Vec::new(),
        }
    }

    /// Appends a token; rejected tokens leave the state unchanged.
    pub fn push(&mut self, automaton: &dyn Automaton, token: &str) -> bool {
        match automaton.walk(self.state, token) {
            Some(s) => {
                self.state = s;
                self.prefix.push_str(token);
                true
            }
            None => false,
        }
    }

    pub fn checkpoint(&mut self) {
        self.checkpoints.push((self.state, self.prefix.len()));
    }

    /// Restores the most recent checkpoint, returning false when none is left.
    pub fn backtrack(&mut self) -> bool {
        match self.checkpoints.pop() {
            Some((state, len)) => {
                self.state = state;
                self.prefix.truncate(len);
                true
            }
            None => false,
        }
    }

    pub fn checkpoints(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_accepting(&self, automaton: &dyn Automaton) -> bool {
        automaton.is_accepting(self.state)
    }
}

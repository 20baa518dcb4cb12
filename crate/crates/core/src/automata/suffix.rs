use std::collections::BTreeMap;

use super::Automaton;

#[derive(Debug, Clone)]
struct State {
    len: usize,
    link: Option<usize>,
    next: BTreeMap<char, usize>,
}

/// Minimal automaton of all substrings of a text, built online.
#[derive(Debug, Clone)]
pub struct SuffixAutomaton {
    states: Vec<State>,
    last: usize,
    text_len: usize,
}

impl SuffixAutomaton {
    pub fn new(text: &str) -> Self {
        let mut sa = SuffixAutomaton {
            states: vec![State {
                len: 0,
                link: None,
                next: BTreeMap::new(),
            }],
            last: 0,
            text_len: 0,
        };
        for c in text.chars() {
            sa.extend(c);
        }
        sa
    }

    /// Appends one character to the indexed text.
    pub fn extend(&mut self, c: char) {
        let cur = self.states.len();
        self.states.push(State {
            len: self.states[self.last].len + 1,
            link: None,
            next: BTreeMap::new(),
        });
        let mut p = Some(self.last);
        while let Some(pi) = p {
            if self.states[pi].next.contains_key(&c) {
                break;
            }
            self.states[pi].next.insert(c, cur);
            p = self.states[pi].link;
        }
        match p {
            None => self.states[cur].link = Some(0),
            Some(pi) => {
                let q = self.states[pi].next[&c];
                if self.states[pi].len + 1 == self.states[q].len {
                    self.states[cur].link = Some(q);
                } else {
                    let clone = self.states.len();
                    let mut cloned = self.states[q].clone();
                    cloned.len = self.states[pi].len + 1;
                    self.states.push(cloned);
                    let mut p = Some(pi);
                    while let Some(pj) = p {
                        if self.states[pj].next.get(&c) != Some(&q) {
                            break;
                        }
                        self.states[pj].next.insert(c, clone);
                        p = self.states[pj].link;
                    }
                    self.states[q].link = Some(clone);
                    self.states[cur].link = Some(clone);
                }
            }
        }
        self.last = cur;
        self.text_len += 1;
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    /// Length of the indexed text in characters.
    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn contains(&self, probe: &str) -> bool {
        self.accepts(probe)
    }

    /// Characters with an outgoing transition from `state`.
    pub fn successors(&self, state: usize) -> impl Iterator<Item = (char, usize)> + '_ {
        self.states[state].next.iter().map(|(c, s)| (*c, *s))
    }
}

impl Automaton for SuffixAutomaton {
    fn start(&self) -> usize {
        0
    }

    fn step(&self, state: usize, c: char) -> Option<usize> {
        self.states[state].next.get(&c).copied()
    }

    fn is_accepting(&self, _state: usize) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_accepts_only_empty() {
        let sa = SuffixAutomaton::new("");
        assert!(sa.contains(""));
        assert!(!sa.contains("a"));
        assert_eq!(sa.state_count(), 1);
    }

    #[test]
    fn abcbc() {
        let sa = SuffixAutomaton::new("abcbc");
        assert!(sa.contains("cb"));
        assert!(sa.contains("bcbc"));
        assert!(!sa.contains("ca"));
        assert!(sa.state_count() <= 2 * 5 - 1);
    }

    #[test]
    fn first_char_steps_and_absent_char_rejects() {
        let sa = SuffixAutomaton::new("hello");
        assert!(sa.step(sa.start(), 'h').is_some());
        assert!(sa.step(sa.start(), 'z').is_none());
    }
}

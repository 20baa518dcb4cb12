//! Regex to minimal total DFA: Thompson NFA, subset construction, then
//! partition refinement.

use std::collections::{BTreeSet, HashMap, VecDeque};

use super::regex::{parse_regex, succ, Node, Ranges};
use super::Automaton;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegexError {
    #[error("regex syntax error at {position} in `{pattern}`: {message}")]
    Syntax {
        pattern: String,
        position: usize,
        message: String,
    },
    #[error("unsupported regex feature: {0}")]
    Unsupported(String),
    #[error("regex expands to too many states")]
    TooLarge,
}

const MAX_NFA_STATES: usize = 50_000;
const MAX_DFA_STATES: usize = 20_000;

#[derive(Default)]
struct Nfa {
    eps: Vec<Vec<usize>>,
    edges: Vec<Vec<(Ranges, usize)>>,
}

impl Nfa {
    fn add(&mut self) -> Result<usize, RegexError> {
        if self.eps.len() >= MAX_NFA_STATES {
            return Err(RegexError::TooLarge);
        }
        self.eps.push(Vec::new());
        self.edges.push(Vec::new());
        Ok(self.eps.len() - 1)
    }

    /// Builds `node` between fresh states, returning (entry, exit).
    fn build(&mut self, node: &Node) -> Result<(usize, usize), RegexError> {
        match node {
            Node::Empty => {
                let s = self.add()?;
                Ok((s, s))
            }
            Node::Class(r) => {
                let s = self.add()?;
                let e = self.add()?;
                self.edges[s].push((r.clone(), e));
                Ok((s, e))
            }
            Node::Concat(items) => {
                let (start, mut end) = self.build(&items[0])?;
                for item in &items[1..] {
                    let (s, e) = self.build(item)?;
                    self.eps[end].push(s);
                    end = e;
                }
                Ok((start, end))
            }
            Node::Alt(alts) => {
                let s = self.add()?;
                let e = self.add()?;
                for a in alts {
                    let (as_, ae) = self.build(a)?;
                    self.eps[s].push(as_);
                    self.eps[ae].push(e);
                }
                Ok((s, e))
            }
            Node::Repeat { node, min, max } => {
                let s = self.add()?;
                let mut end = s;
                for _ in 0..*min {
                    let (a, b) = self.build(node)?;
                    self.eps[end].push(a);
                    end = b;
                }
                match max {
                    None => {
                        let (a, b) = self.build(node)?;
                        self.eps[end].push(a);
                        self.eps[b].push(a);
                        let e = self.add()?;
                        self.eps[end].push(e);
                        self.eps[b].push(e);
                        Ok((s, e))
                    }
                    Some(max) => {
                        let e = self.add()?;
                        self.eps[end].push(e);
                        for _ in *min..*max {
                            let (a, b) = self.build(node)?;
                            self.eps[end].push(a);
                            self.eps[b].push(e);
                            end = b;
                        }
                        Ok((s, e))
                    }
                }
            }
        }
    }

    fn closure(&self, set: &mut BTreeSet<usize>) {
        let mut stack: Vec<usize> = set.iter().copied().collect();
        while let Some(s) = stack.pop() {
            for &n in &self.eps[s] {
                if set.insert(n) {
                    stack.push(n);
                }
            }
        }
    }
}

/// Sorted starts of the alphabet classes induced by `ranges`.
fn class_starts<'a>(ranges: impl Iterator<Item = &'a (char, char)>) -> Vec<char> {
    let mut cuts = BTreeSet::new();
    cuts.insert('\0');
    for &(lo, hi) in ranges {
        cuts.insert(lo);
        if let Some(n) = succ(hi) {
            cuts.insert(n);
        }
    }
    cuts.into_iter().collect()
}

#[cfg(test)]
fn covers(r: &Ranges, c: char) -> bool {
    let i = r.partition_point(|&(lo, _)| lo <= c);
    i > 0 && r[i - 1].1 >= c
}

/// A total DFA over character classes. State `dead()` (if any) has no path
/// to acceptance; stepping into it rejects.
#[derive(Debug, Clone, PartialEq)]
pub struct Dfa {
    classes: Vec<char>,
    trans: Vec<Vec<usize>>,
    accept: Vec<bool>,
    live: Vec<bool>,
    start: usize,
}

impl Dfa {
    /// Compiles a pattern with search semantics: an alternative without `^`
    /// may be preceded by anything and one without `$` followed by anything.
    pub fn from_regex(pattern: &str) -> Result<Dfa, RegexError> {
        let branches = parse_regex(pattern)?;
        let mut nfa = Nfa::default();
        let start = nfa.add()?;
        let accept = nfa.add()?;
        let any = Node::Repeat {
            node: Box::new(Node::Class(vec![('\0', char::MAX)])),
            min: 0,
            max: None,
        };
        for b in &branches {
            let mut parts = Vec::new();
            if !b.anchored_start {
                parts.push(any.clone());
            }
            parts.push(b.node.clone());
            if !b.anchored_end {
                parts.push(any.clone());
            }
            let (s, e) = nfa.build(&Node::Concat(parts))?;
            nfa.eps[start].push(s);
            nfa.eps[e].push(accept);
        }
        Ok(Self::determinize(&nfa, start, accept)?.minimize())
    }

    /// Compiles a pattern that must match the whole string.
    pub fn from_regex_full(pattern: &str) -> Result<Dfa, RegexError> {
        Dfa::from_regex(&format!("^(?:{pattern})$"))
    }

    fn determinize(nfa: &Nfa, start: usize, accept: usize) -> Result<Dfa, RegexError> {
        let classes = class_starts(nfa.edges.iter().flatten().flat_map(|(r, _)| r.iter()));
        let mut init = BTreeSet::from([start]);
        nfa.closure(&mut init);
        let mut index: HashMap<BTreeSet<usize>, usize> = HashMap::new();
        let mut sets = vec![init.clone()];
        index.insert(init, 0);
        // Per NFA state, (first class, last class, target) for each edge.
        let spans: Vec<Vec<(usize, usize, usize)>> = nfa
            .edges
            .iter()
            .map(|es| {
                es.iter()
                    .flat_map(|(r, t)| {
                        r.iter().map(|&(lo, hi)| {
                            let a = classes.partition_point(|&c| c < lo);
                            let b = classes.partition_point(|&c| c <= hi) - 1;
                            (a, b, *t)
                        })
                    })
                    .collect()
            })
            .collect();
        let mut trans: Vec<Vec<usize>> = Vec::new();
        let mut i = 0;
        while i < sets.len() {
            let mut nexts = vec![BTreeSet::new(); classes.len()];
            for &s in &sets[i] {
                for &(a, b, t) in &spans[s] {
                    for next in &mut nexts[a..=b] {
                        next.insert(t);
                    }
                }
            }
            let mut row = Vec::with_capacity(classes.len());
            for mut next in nexts {
                nfa.closure(&mut next);
                let id = match index.get(&next) {
                    Some(&id) => id,
                    None => {
                        if sets.len() >= MAX_DFA_STATES {
                            return Err(RegexError::TooLarge);
                        }
                        sets.push(next.clone());
                        index.insert(next, sets.len() - 1);
                        sets.len() - 1
                    }
                };
                row.push(id);
            }
            trans.push(row);
            i += 1;
        }
        let accept: Vec<bool> = sets.iter().map(|s| s.contains(&accept)).collect();
        Ok(Dfa::assemble(classes, trans, accept, 0))
    }

    fn assemble(classes: Vec<char>, trans: Vec<Vec<usize>>, accept: Vec<bool>, start: usize) -> Dfa {
        let n = trans.len();
        let mut rev: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (s, row) in trans.iter().enumerate() {
            for &t in row {
                rev[t].push(s);
            }
        }
        let mut live = accept.clone();
        let mut queue: VecDeque<usize> = (0..n).filter(|&s| accept[s]).collect();
        while let Some(s) = queue.pop_front() {
            for &p in &rev[s] {
                if !live[p] {
                    live[p] = true;
                    queue.push_back(p);
                }
            }
        }
        Dfa {
            classes,
            trans,
            accept,
            live,
            start,
        }
    }

    /// Partition refinement to the coarsest equivalence, states renumbered
    /// in breadth-first order from the start state.
    pub fn minimize(&self) -> Dfa {
        let n = self.trans.len();
        let mut block: Vec<usize> = self.accept.iter().map(|&a| usize::from(a)).collect();
        let mut count = block.iter().collect::<BTreeSet<_>>().len();
        loop {
            let mut sigs: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
            let mut next = vec![0; n];
            for s in 0..n {
                let sig = (
                    block[s],
                    self.trans[s].iter().map(|&t| block[t]).collect::<Vec<_>>(),
                );
                let len = sigs.len();
                next[s] = *sigs.entry(sig).or_insert(len);
            }
            let new_count = sigs.len();
            block = next;
            if new_count == count {
                break;
            }
            count = new_count;
        }
        // Renumber reachable blocks breadth-first.
        let mut order: HashMap<usize, usize> = HashMap::new();
        let mut reps: Vec<usize> = Vec::new();
        let mut queue = VecDeque::from([self.start]);
        order.insert(block[self.start], 0);
        reps.push(self.start);
        while let Some(s) = queue.pop_front() {
            for &t in &self.trans[s] {
                if !order.contains_key(&block[t]) {
                    order.insert(block[t], reps.len());
                    reps.push(t);
                    queue.push_back(t);
                }
            }
        }
        let trans: Vec<Vec<usize>> = reps
            .iter()
            .map(|&s| self.trans[s].iter().map(|&t| order[&block[t]]).collect())
            .collect();
        let accept = reps.iter().map(|&s| self.accept[s]).collect();
        Dfa::assemble(self.classes.clone(), trans, accept, 0).merge_classes()
    }

    /// Merges adjacent classes with identical columns.
    fn merge_classes(mut self) -> Dfa {
        let mut keep = vec![0usize];
        for c in 1..self.classes.len() {
            let prev = *keep.last().expect("nonempty");
            if self.trans.iter().any(|row| row[c] != row[prev]) {
                keep.push(c);
            }
        }
        self.classes = keep.iter().map(|&c| self.classes[c]).collect();
        for row in &mut self.trans {
            *row = keep.iter().map(|&c| row[c]).collect();
        }
        self
    }

    pub fn state_count(&self) -> usize {
        self.trans.len()
    }

    fn class_of(&self, c: char) -> usize {
        self.classes.partition_point(|&s| s <= c) - 1
    }

    /// Total transition, including moves into the dead state.
    pub fn next_state(&self, state: usize, c: char) -> usize {
        self.trans[state][self.class_of(c)]
    }

    pub fn is_empty(&self) -> bool {
        !self.live[self.start]
    }

    /// Product automaton accepting the intersection of both languages.
    pub fn intersect(&self, other: &Dfa) -> Dfa {
        let classes = class_starts(
            self.classes
                .iter()
                .chain(&other.classes)
                .map(|c| (*c, *c))
                .collect::<Vec<_>>()
                .iter(),
        );
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut pairs = vec![(self.start, other.start)];
        index.insert(pairs[0], 0);
        let mut trans = Vec::new();
        let mut i = 0;
        while i < pairs.len() {
            let (a, b) = pairs[i];
            let row = classes
                .iter()
                .map(|&c| {
                    let next = (self.next_state(a, c), other.next_state(b, c));
                    *index.entry(next).or_insert_with(|| {
                        pairs.push(next);
                        pairs.len() - 1
                    })
                })
                .collect();
            trans.push(row);
            i += 1;
        }
        let accept = pairs
            .iter()
            .map(|&(a, b)| self.accept[a] && other.accept[b])
            .collect();
        Dfa::assemble(classes, trans, accept, 0).minimize()
    }

    /// Shortest string accepted by both automata, if any.
    pub fn intersection_witness(&self, other: &Dfa) -> Option<String> {
        let reps = class_starts(
            self.classes
                .iter()
                .chain(&other.classes)
                .map(|c| (*c, *c))
                .collect::<Vec<_>>()
                .iter(),
        );
        let start = (self.start, other.start);
        let mut parent: HashMap<(usize, usize), Option<((usize, usize), char)>> = HashMap::new();
        parent.insert(start, None);
        let mut queue = VecDeque::from([start]);
        while let Some(pair @ (a, b)) = queue.pop_front() {
            if self.accept[a] && other.accept[b] {
                let mut out = Vec::new();
                let mut cur = pair;
                while let Some(Some((p, c))) = parent.get(&cur) {
                    out.push(*c);
                    cur = *p;
                }
                return Some(out.into_iter().rev().collect());
            }
            for &c in &reps {
                let next = (self.next_state(a, c), other.next_state(b, c));
                if self.live[next.0] && other.live[next.1] && !parent.contains_key(&next) {
                    parent.insert(next, Some((pair, c)));
                    queue.push_back(next);
                }
            }
        }
        None
    }

    /// Shortest accepted string, if the language is non-empty.
    pub fn shortest_accepted(&self) -> Option<String> {
        self.intersection_witness(&Dfa::universal())
    }

    fn universal() -> Dfa {
        Dfa::assemble(vec!['\0'], vec![vec![0]], vec![true], 0)
    }

    /// DFA accepting exactly the strings of `any_but_newline()*`; used in tests.
    #[cfg(test)]
    fn dot_star() -> Dfa {
        let r = crate::automata::regex::any_but_newline();
        let classes = class_starts(r.iter());
        let trans: Vec<Vec<usize>> = vec![
            classes.iter().map(|&c| if covers(&r, c) { 0 } else { 1 }).collect(),
            vec![1; classes.len()],
        ];
        Dfa::assemble(classes, trans, vec![true, false], 0).minimize()
    }
}

impl Automaton for Dfa {
    fn start(&self) -> usize {
        self.start
    }

    fn step(&self, state: usize, c: char) -> Option<usize> {
        let t = self.next_state(state, c);
        self.live[t].then_some(t)
    }

    fn is_accepting(&self, state: usize) -> bool {
        self.accept[state]
    }

    fn is_live(&self, state: usize) -> bool {
        self.live[state]
    }
}

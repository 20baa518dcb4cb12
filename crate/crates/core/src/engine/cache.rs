//! Per-operator store of accepted outputs, used as few-shot examples on retry.

use std::collections::HashMap;

#[derive(Debug, Clone)]
struct Entry {
    operator: String,
    prompt: String,
    output: String,
    vector: HashMap<String, f64>,
    last_used: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub prompt: String,
    pub output: String,
}

/// Bag-of-words nearest-neighbour cache with least-recently-used eviction.
#[derive(Debug, Clone)]
pub struct ExemplarCache {
    capacity: usize,
    clock: u64,
    entries: Vec<Entry>,
}

fn bag(text: &str) -> HashMap<String, f64> {
    let mut v = HashMap::new();
    for w in crate::util::words(text) {
        *v.entry(w).or_insert(0.0) += 1.0;
    }
    v
}

fn cosine(a: &HashMap<String, f64>, b: &HashMap<String, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl ExemplarCache {
    pub fn new(capacity: usize) -> Self {
        ExemplarCache {
            capacity,
            clock: 0,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Up to `k` exemplars of `operator` most similar to `prompt`, best
    /// first. Ties keep insertion order.
    pub fn nearest(&self, operator: &str, prompt: &str, k: usize) -> Vec<Exemplar> {
        let q = bag(prompt);
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.operator == operator)
            .map(|(i, e)| (cosine(&q, &e.vector), i))
            .filter(|(s, _)| *s > 0.0)
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored
            .into_iter()
            .take(k)
            .map(|(_, i)| Exemplar {
                prompt: self.entries[i].prompt.clone(),
                output: self.entries[i].output.clone(),
            })
            .collect()
    }

    /// Marks an exemplar as used.
    pub fn touch(&mut self, operator: &str, prompt: &str) {
        self.clock += 1;
        let now = self.clock;
        if let Some(e) = self.entries.iter_mut().find(|e| e.operator == operator && e.prompt == prompt) {
            e.last_used = now;
        }
    }

    pub fn insert(&mut self, operator: &str, prompt: &str, output: &str) {
        if self.capacity == 0 {
            return;
        }
        self.clock += 1;
        let now = self.clock;
        if let Some(e) = self.entries.iter_mut().find(|e| e.operator == operator && e.prompt == prompt) {
            e.output = output.to_string();
            e.last_used = now;
            return;
        }
        if self.entries.len() >= self.capacity {
            let oldest = (0..self.entries.len())
                .min_by_key(|&i| self.entries[i].last_used)
                .expect("non-empty");
            self.entries.remove(oldest);
        }
        self.entries.push(Entry {
            operator: operator.to_string(),
            prompt: prompt.to_string(),
            output: output.to_string(),
            vector: bag(prompt),
            last_used: now,
        });
    }
}

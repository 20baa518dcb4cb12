/// Splits streamed text at sentence ends: a terminator followed by
/// whitespace, or by the end of output when finishing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmenter {
    pub terminators: Vec<char>,
}

impl Default for Segmenter {
    fn default() -> Self {
        Segmenter {
            terminators: vec!['.', '!', '?'],
        }
    }
}

impl Segmenter {
    /// Byte offset just past the first confirmed terminator in `text`.
    pub fn boundary(&self, text: &str) -> Option<usize> {
        let mut it = text.char_indices().peekable();
        while let Some((i, c)) = it.next() {
            if self.terminators.contains(&c) {
                if let Some((_, n)) = it.peek() {
                    if n.is_whitespace() {
                        return Some(i + c.len_utf8());
                    }
                }
            }
        }
        None
    }

    /// Splits a complete text into segments; the last one may lack a terminator.
    pub fn split<'t>(&self, mut text: &'t str) -> Vec<&'t str> {
        let mut out = Vec::new();
        while let Some(end) = self.boundary(text) {
            out.push(&text[..end]);
            text = &text[end..];
        }
        if !text.trim().is_empty() {
            out.push(text);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationPolicy {
    /// Drop the offending segment and resume from the last accepted one.
    Backtrack,
    /// Stop and report the violation.
    Fail,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    Accepted { segment: String },
    Backtracked { segment: String, reason: String },
    Violation { segment: String, reason: String },
}

/// Checks output one segment at a time while it is being generated.
///
/// The checker receives the accepted output plus the new segment and
/// returns `Some(reason)` on violation.
pub struct StreamGuard<F> {
    segmenter: Segmenter,
    checker: F,
    policy: ViolationPolicy,
    committed: String,
    pending: String,
    backtracks: usize,
    violation: Option<String>,
}

impl<F, E> StreamGuard<F>
where
    F: FnMut(&str) -> Result<Option<String>, E>,
{
    pub fn new(segmenter: Segmenter, policy: ViolationPolicy, checker: F) -> Self {
        StreamGuard {
            segmenter,
            checker,
            policy,
            committed: String::new(),
            pending: String::new(),
            backtracks: 0,
            violation: None,
        }
    }

    pub fn feed(&mut self, token: &str) -> Result<Vec<StreamEvent>, E> {
        let mut events = Vec::new();
        if self.violation.is_some() {
            return Ok(events);
        }
        self.pending.push_str(token);
        while let Some(end) = self.segmenter.boundary(&self.pending) {
            let segment: String = self.pending.drain(..end).collect();
            events.push(self.check_segment(segment)?);
            if self.violation.is_some() {
                break;
            }
        }
        Ok(events)
    }

    /// Checks whatever remains after the last boundary.
    pub fn finish(&mut self) -> Result<Option<StreamEvent>, E> {
        if self.violation.is_some() || self.pending.trim().is_empty() {
            self.pending.clear();
            return Ok(None);
        }
        let segment = std::mem::take(&mut self.pending);
        self.check_segment(segment).map(Some)
    }

    fn check_segment(&mut self, segment: String) -> Result<StreamEvent, E> {
        let candidate = format!("{}{}", self.committed, segment);
        match (self.checker)(&candidate)? {
            None => {
                self.committed = candidate;
                Ok(StreamEvent::Accepted { segment })
            }
            Some(reason) => match self.policy {
                ViolationPolicy::Backtrack => {
                    self.backtracks += 1;
                    Ok(StreamEvent::Backtracked { segment, reason })
                }
                ViolationPolicy::Fail => {
                    self.violation = Some(reason.clone());
                    Ok(StreamEvent::Violation { segment, reason })
                }
            },
        }
    }

    /// Output accepted so far.
    pub fn output(&self) -> &str {
        &self.committed
    }

    /// Length of the accepted output, the position decoding resumes from.
    pub fn checkpoint(&self) -> usize {
        self.committed.len()
    }

    pub fn backtracks(&self) -> usize {
        self.backtracks
    }

    pub fn violation(&self) -> Option<&str> {
        self.violation.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_marker(out: &str) -> Result<Option<String>, ()> {
        Ok(out
            .contains("UNSUPPORTED")
            .then(|| "unsupported claim".to_string()))
    }

    fn run(text: &str, policy: ViolationPolicy) -> (String, usize, Option<String>, Option<StreamEvent>) {
        let mut g = StreamGuard::new(Segmenter::default(), policy, no_marker);
        for tok in text.split_inclusive(' ') {
            g.feed(tok).unwrap();
        }
        let last = g.finish().unwrap();
        (
            g.output().to_string(),
            g.backtracks(),
            g.violation().map(str::to_string),
            last,
        )
    }

    #[test]
    fn clean_sentences_pass_through() {
        let (out, b, v, _) = run("Fever noted. Lactate high.", ViolationPolicy::Backtrack);
        assert_eq!(out, "Fever noted. Lactate high.");
        assert_eq!((b, v), (0, None));
    }

    #[test]
    fn backtrack_drops_flagged_sentence() {
        let (out, b, v, _) = run("Fever noted. UNSUPPORTED sepsis.", ViolationPolicy::Backtrack);
        assert_eq!(out, "Fever noted.");
        assert_eq!((b, v), (1, None));
    }

    #[test]
    fn fail_mode_surfaces_violation_on_finish() {
        let (out, _, v, last) = run("Fever noted. UNSUPPORTED", ViolationPolicy::Fail);
        assert_eq!(out, "Fever noted.");
        assert_eq!(v.as_deref(), Some("unsupported claim"));
        assert!(matches!(last, Some(StreamEvent::Violation { .. })));
    }

    #[test]
    fn boundaries_need_following_whitespace() {
        let s = Segmenter::default();
        assert_eq!(s.boundary("3.5 mg"), None);
        assert_eq!(s.boundary("Done. Next"), Some(5));
        assert_eq!(s.split("A. B! C"), ["A.", " B!", " C"]);
    }

    #[test]
    fn checker_errors_propagate() {
        let mut g = StreamGuard::new(Segmenter::default(), ViolationPolicy::Fail, |_: &str| {
            Err::<Option<String>, _>("transport")
        });
        assert_eq!(g.feed("One. Two").unwrap_err(), "transport");
    }
}

//! Deterministic scripted model used by tests and offline runs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    parse_contract, sigmoid, JudgeMode, JudgeRequest, Judgement, Model, ModelError, ModelRequest,
    ModelResponse,
};
use crate::automata::{allowed_tokens, Automaton, MaskState};
use crate::util::stable_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    Char,
    /// Words with their trailing whitespace.
    Whitespace,
}

impl TokenizerKind {
    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            TokenizerKind::Char => text.chars().map(String::from).collect(),
            TokenizerKind::Whitespace => {
                let mut out: Vec<String> = Vec::new();
                let mut cur = String::new();
                for c in text.chars() {
                    if !c.is_whitespace() && cur.ends_with(char::is_whitespace) {
                        out.push(std::mem::take(&mut cur));
                    }
                    cur.push(c);
                }
                if !cur.is_empty() {
                    out.push(cur);
                }
                out
            }
        }
    }
}

/// Copies a span of an input field, inserting stray tokens with probability
/// `noise` at each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopySpec {
    pub field: String,
    /// The span starts after the first occurrence of this marker.
    #[serde(default)]
    pub after: Option<String>,
    /// The span ends before the next occurrence of this marker.
    #[serde(default)]
    pub until: Option<String>,
    #[serde(default)]
    pub noise: f64,
}

impl CopySpec {
    fn span<'a>(&self, field: &'a str) -> &'a str {
        let mut s = field;
        if let Some(a) = &self.after {
            s = match s.find(a.as_str()) {
                Some(i) => &s[i + a.len()..],
                None => "",
            };
        }
        if let Some(u) = &self.until {
            if let Some(i) = s.find(u.as_str()) {
                s = &s[..i];
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResponseSpec {
    /// Text with `{attr}` placeholders filled from the request inputs.
    Template(String),
    Copy { copy: CopySpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    /// Regex searched for in the prompt.
    pub pattern: String,
    /// Response per attempt; the last one repeats.
    pub responses: Vec<ResponseSpec>,
    #[serde(default)]
    pub cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeRule {
    #[serde(default)]
    pub mode: Option<JudgeMode>,
    /// Regexes that must all be found in the respective request fields.
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub input: Option<String>,
    #[serde(default)]
    pub output: Option<String>,
    pub verdict: bool,
    #[serde(default)]
    pub logit_true: Option<f64>,
    #[serde(default)]
    pub logit_false: Option<f64>,
    /// Probability of reporting the opposite verdict.
    #[serde(default)]
    pub flip: f64,
    #[serde(default)]
    pub rationale: Option<String>,
}

impl JudgeRule {
    pub fn always(verdict: bool) -> Self {
        JudgeRule {
            mode: None,
            task: None,
            input: None,
            output: None,
            verdict,
            logit_true: None,
            logit_false: None,
            flip: 0.0,
            rationale: None,
        }
    }

    fn logits(&self) -> (f64, f64) {
        let (t, f) = if self.verdict { (2.0, 0.0) } else { (0.0, 2.0) };
        (self.logit_true.unwrap_or(t), self.logit_false.unwrap_or(f))
    }
}

fn default_cost() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FakeScript {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tokenizer: TokenizerKind,
    #[serde(default = "default_cost")]
    pub default_cost: f64,
    #[serde(default = "default_cost")]
    pub judge_cost: f64,
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub judge: Vec<JudgeRule>,
    /// Used when no judge rule matches.
    #[serde(default)]
    pub judge_default: Option<JudgeRule>,
}

impl Default for FakeScript {
    fn default() -> Self {
        FakeScript {
            seed: 0,
            tokenizer: TokenizerKind::Char,
            default_cost: 1.0,
            judge_cost: 1.0,
            rules: Vec::new(),
            judge: Vec::new(),
            judge_default: None,
        }
    }
}

struct CompiledJudge {
    rule: JudgeRule,
    task: Option<Regex>,
    input: Option<Regex>,
    output: Option<Regex>,
}

pub struct FakeModel {
    script: FakeScript,
    rules: Vec<Regex>,
    judges: Vec<CompiledJudge>,
}

fn compile(pattern: &str) -> Result<Regex, ModelError> {
    Regex::new(pattern).map_err(|e| ModelError::Malformed(format!("bad pattern `{pattern}`: {e}")))
}

fn fill(template: &str, inputs: &std::collections::BTreeMap<String, String>) -> String {
    let mut out = template.to_string();
    for (k, v) in inputs {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

impl FakeModel {
    pub fn new(script: FakeScript) -> Result<Self, ModelError> {
        let rules = script
            .rules
            .iter()
            .map(|r| compile(&r.pattern))
            .collect::<Result<_, _>>()?;
        let opt = |p: &Option<String>| p.as_deref().map(compile).transpose();
        let judges = script
            .judge
            .iter()
            .map(|r| {
                Ok(CompiledJudge {
                    task: opt(&r.task)?,
                    input: opt(&r.input)?,
                    output: opt(&r.output)?,
                    rule: r.clone(),
                })
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(FakeModel {
            script,
            rules,
            judges,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let script: FakeScript = serde_json::from_str(text)
            .map_err(|e| ModelError::Malformed(format!("fake model script: {e}")))?;
        FakeModel::new(script)
    }

    pub fn from_path(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Malformed(format!("{}: {e}", path.display())))?;
        FakeModel::from_json(&text)
    }

    pub fn script(&self) -> &FakeScript {
        &self.script
    }

    fn rule_for(&self, prompt: &str) -> Result<&Rule, ModelError> {
        self.rules
            .iter()
            .position(|re| re.is_match(prompt))
            .map(|i| &self.script.rules[i])
            .ok_or_else(|| {
                let head: String = prompt.chars().take(60).collect();
                ModelError::NoRule(head)
            })
    }

    fn rng(&self, request: &ModelRequest) -> ChaCha8Rng {
        let attempt = request.attempt.to_string();
        let seeds = [self.script.seed.to_string(), request.seed.to_string()];
        ChaCha8Rng::seed_from_u64(stable_hash(&[
            seeds[0].as_str(),
            seeds[1].as_str(),
            request.operator.as_str(),
            request.prompt.as_str(),
            attempt.as_str(),
        ]))
    }

    /// Runs the scripted policy, keeping only tokens `mask` allows.
    fn decode(&self, request: &ModelRequest, mask: Option<&dyn Automaton>) -> Result<ModelResponse, ModelError> {
        let rule = self.rule_for(&request.prompt)?;
        let spec = &rule.responses[(request.attempt as usize).min(rule.responses.len().saturating_sub(1))];
        let tok = self.script.tokenizer;
        let (intended, pool, noise) = match spec {
            ResponseSpec::Template(t) => (tok.tokenize(&fill(t, &request.inputs)), Vec::new(), 0.0),
            ResponseSpec::Copy { copy } => {
                let field = request.inputs.get(&copy.field).map(String::as_str).unwrap_or("");
                let mut pool = tok.tokenize(field);
                pool.sort();
                pool.dedup();
                (tok.tokenize(copy.span(field)), pool, copy.noise)
            }
        };
        let mut rng = self.rng(request);
        let mut tokens: Vec<String> = Vec::new();
        let mut state = mask.map(MaskState::new);
        let mut cur = 0;
        let max_steps = 4 * intended.len() + 16;
        for _ in 0..max_steps {
            if cur >= intended.len() {
                break;
            }
            let stray = if !pool.is_empty() && rng.random_bool(noise.clamp(0.0, 1.0)) {
                Some(pool[rng.random_range(0..pool.len())].clone())
            } else {
                None
            };
            // Candidates in priority order: a stray token, then the intended
            // token and a short lookahead.
            let mut cands: Vec<(String, Option<usize>)> = stray.into_iter().map(|t| (t, None)).collect();
            for (i, t) in intended.iter().enumerate().skip(cur).take(3) {
                cands.push((t.clone(), Some(i)));
            }
            let pick = match (&mut state, mask) {
                (Some(st), Some(m)) => {
                    let texts: Vec<&str> = cands.iter().map(|(t, _)| t.as_str()).collect();
                    allowed_tokens(m, st.state, &texts).first().copied()
                }
                _ => Some(0),
            };
            let Some(pick) = pick else { break };
            let (text, pos) = cands.swap_remove(pick);
            if let (Some(st), Some(m)) = (&mut state, mask) {
                st.push(m, &text);
                if st.is_accepting(m) {
                    st.checkpoint();
                }
            }
            if let Some(p) = pos {
                cur = p + 1;
            }
            tokens.push(text);
        }
        if let (Some(st), Some(m)) = (&mut state, mask) {
            if !st.is_accepting(m) {
                // Roll back to the longest accepted prefix.
                let keep = if st.backtrack() { st.prefix.len() } else { 0 };
                let mut len = 0;
                tokens.retain(|t| {
                    len += t.len();
                    len <= keep
                });
            }
        }
        let text: String = tokens.concat();
        let (cot, _) = parse_contract(&text, request.contract).unwrap_or((None, None));
        Ok(ModelResponse {
            text,
            cot,
            confidence: None,
            tokens,
            cost: rule.cost.unwrap_or(self.script.default_cost),
        })
    }
}

impl Model for FakeModel {
    fn name(&self) -> &str {
        "fake"
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, ModelError> {
        self.decode(request, None)
    }

    fn complete_constrained(
        &self,
        request: &ModelRequest,
        mask: &dyn Automaton,
    ) -> Result<ModelResponse, ModelError> {
        self.decode(request, Some(mask))
    }

    fn judge(&self, request: &JudgeRequest) -> Result<Judgement, ModelError> {
        let found = |re: &Option<Regex>, text: &str| re.as_ref().is_none_or(|r| r.is_match(text));
        let rule = self
            .judges
            .iter()
            .find(|j| {
                j.rule.mode.is_none_or(|m| m == request.mode)
                    && found(&j.task, &request.task)
                    && found(&j.input, &request.input)
                    && found(&j.output, &request.output)
            })
            .map(|j| &j.rule)
            .or(self.script.judge_default.as_ref())
            .ok_or(ModelError::NoJudgeRule)?;
        let mode = serde_json::to_string(&request.mode).unwrap_or_default();
        let seeds = [self.script.seed.to_string(), request.seed.to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[
            seeds[0].as_str(),
            seeds[1].as_str(),
            mode.as_str(),
            request.task.as_str(),
            request.input.as_str(),
            request.output.as_str(),
        ]));
        let flipped = rng.random_bool(rule.flip.clamp(0.0, 1.0));
        let (lt, lf) = rule.logits();
        // A flip swaps the logits too, so the reported confidence is that
        // of the rule's own verdict.
        let margin = if rule.verdict { lt - lf } else { lf - lt };
        Ok(Judgement {
            holds: rule.verdict != flipped,
            confidence: Some(sigmoid(margin)),
            rationale: rule
                .rationale
                .clone()
                .unwrap_or_else(|| format!("scripted {} verdict", if rule.verdict { "positive" } else { "negative" })),
            cost: self.script.judge_cost,
        })
    }

    fn confidence_capable(&self) -> bool {
        true
    }

    fn token_level(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automata::{Dfa, SuffixAutomaton};

    fn model(json: &str) -> FakeModel {
        FakeModel::from_json(json).unwrap()
    }

    fn req(prompt: &str, attempt: u32) -> ModelRequest {
        let mut r = ModelRequest::new("op", prompt);
        r.attempt = attempt;
        r
    }

    #[test]
    fn attempt_selects_variant() {
        let m = model(r#"{"rules": [{"pattern": "canonicalize.*dob", "responses": ["3/12/1985", "1985-03-12"]}]}"#);
        assert_eq!(m.complete(&req("canonicalize the dob", 0)).unwrap().text, "3/12/1985");
        assert_eq!(m.complete(&req("canonicalize the dob", 1)).unwrap().text, "1985-03-12");
        assert_eq!(m.complete(&req("canonicalize the dob", 5)).unwrap().text, "1985-03-12");
    }

    #[test]
    fn empty_rule_set_has_no_rule() {
        let m = model("{}");
        assert!(matches!(m.complete(&req("x", 0)), Err(ModelError::NoRule(_))));
    }

    #[test]
    fn templates_fill_inputs() {
        let m = model(r#"{"rules": [{"pattern": "", "responses": ["<{a}>"]}]}"#);
        let mut r = req("p", 0);
        r.inputs.insert("a".into(), "x".into());
        assert_eq!(m.complete(&r).unwrap().text, "<x>");
    }

    #[test]
    fn masked_copy_stays_a_substring() {
        let m = model(r#"{"rules": [{"pattern": "", "responses": [{"copy": {"field": "src", "after": "Exam: ", "until": ".", "noise": 0.3}}]}]}"#);
        let source = "Exam: febrile and tachycardic. Labs: lactate 4.1.";
        let sa = SuffixAutomaton::new(source);
        let mut dirty = 0;
        for i in 0..50 {
            let mut r = req(&format!("extract {i}"), 0);
            r.inputs.insert("src".into(), source.into());
            let masked = m.complete_constrained(&r, &sa).unwrap();
            assert!(source.contains(&masked.text), "{:?}", masked.text);
            assert_eq!(masked.tokens.concat(), masked.text);
            if !source.contains(&m.complete(&r).unwrap().text) {
                dirty += 1;
            }
        }
        assert!(dirty > 5);
    }

    #[test]
    fn permissive_mask_matches_unconstrained() {
        let m = model(r#"{"rules": [{"pattern": "", "responses": [{"copy": {"field": "src", "noise": 0.5}}]}]}"#);
        let any = Dfa::from_regex("").unwrap();
        let mut r = req("x", 0);
        r.inputs.insert("src".into(), "some text to copy".into());
        assert_eq!(m.complete(&r).unwrap(), m.complete_constrained(&r, &any).unwrap());
    }

    #[test]
    fn digit_mask_drops_letters() {
        let m = model(r#"{"rules": [{"pattern": "", "responses": ["12a3"]}]}"#);
        let d = Dfa::from_regex(r"^\d+$").unwrap();
        assert_eq!(m.complete_constrained(&req("x", 0), &d).unwrap().text, "123");
    }

    #[test]
    fn judge_rules_and_confidence() {
        let m = model(
            r#"{"judge": [{"mode": "fact_check", "output": "UNSUPPORTED", "verdict": false, "logit_true": 0.0, "logit_false": 3.0}],
                "judge_default": {"verdict": true}}"#,
        );
        let j = |output: &str| {
            m.judge(&JudgeRequest {
                mode: JudgeMode::FactCheck,
                task: String::new(),
                input: "src".into(),
                output: output.into(),
                seed: 0,
            })
            .unwrap()
        };
        let bad = j("an UNSUPPORTED claim");
        assert!(!bad.holds);
        assert!((bad.confidence.unwrap() - sigmoid(3.0)).abs() < 1e-12);
        assert!(j("fine").holds);
        assert!(matches!(
            model("{}").judge(&JudgeRequest {
                mode: JudgeMode::Relevance,
                task: String::new(),
                input: String::new(),
                output: String::new(),
                seed: 0
            }),
            Err(ModelError::NoJudgeRule)
        ));
    }

    #[test]
    fn flip_rate_matches_probability() {
        let m = model(r#"{"judge_default": {"verdict": true, "flip": 0.2}}"#);
        let n = 10_000;
        let flips = (0..n)
            .filter(|i| {
                !m.judge(&JudgeRequest {
                    mode: JudgeMode::SemanticMatch,
                    task: String::new(),
                    input: String::new(),
                    output: i.to_string(),
                    seed: 0,
                })
                .unwrap()
                .holds
            })
            .count();
        let rate = flips as f64 / n as f64;
        assert!((rate - 0.2).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn whitespace_tokens_keep_spacing() {
        assert_eq!(TokenizerKind::Whitespace.tokenize("a  b c"), ["a  ", "b ", "c"]);
        assert_eq!(TokenizerKind::Whitespace.tokenize(" a"), [" ", "a"]);
    }
}

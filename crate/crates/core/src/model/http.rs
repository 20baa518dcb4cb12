//! Client for a chat-completions style HTTP endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    parse_contract, Contract, JudgeMode, JudgeRequest, Judgement, Model, ModelError, ModelRequest,
    ModelResponse,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Full URL requests are posted to.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Cost units charged per request.
    #[serde(default = "default_cost")]
    pub cost_per_call: f64,
}

fn default_timeout() -> u64 {
    60
}

fn default_cost() -> f64 {
    1.0
}

pub struct HttpModel {
    config: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

const COT_INSTRUCTION: &str = "Answer in this exact format:\nPREMISES:\n- <fact from the input>\nSTEPS:\n- <reasoning step>\nANSWER: true|false";

impl HttpModel {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        HttpModel { config, agent }
    }

    fn chat(&self, prompt: &str, seed: Option<u64>) -> Result<String, ModelError> {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        if let Some(s) = seed {
            body["seed"] = s.into();
        }
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(var) = &self.config.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| ModelError::Transport(format!("environment variable {var} is not set")))?;
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => ModelError::Status(code, "request rejected".into()),
            other => ModelError::Transport(other.to_string()),
        })?;
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ModelError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ModelError::Malformed("no choices in response".into()))
    }
}

fn judge_prompt(r: &JudgeRequest) -> String {
    let question = match r.mode {
        JudgeMode::FactCheck => "Is every claim in the output supported by the input?",
        JudgeMode::Relevance => "Does the output do what the task asks, using the input?",
        JudgeMode::SoundnessSteps => "Does each reasoning step in the output follow from the previous ones and the premises?",
        JudgeMode::SemanticMatch => "Does the output contain content matching the task description?",
    };
    format!(
        "{question}\nTask: {}\nInput: {}\nOutput: {}\nAnswer true or false.",
        r.task, r.input, r.output
    )
}

impl Model for HttpModel {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, ModelError> {
        let prompt = match request.contract {
            Contract::BoolCot => format!("{}\n\n{COT_INSTRUCTION}", request.prompt),
            Contract::Bool => format!("{}\n\nAnswer true or false.", request.prompt),
            _ => request.prompt.clone(),
        };
        let text = self.chat(&prompt, Some(request.seed))?;
        let (cot, _) = parse_contract(&text, request.contract).unwrap_or((None, None));
        Ok(ModelResponse {
            tokens: vec![text.clone()],
            text,
            cot,
            confidence: None,
            cost: self.config.cost_per_call,
        })
    }

    fn judge(&self, request: &JudgeRequest) -> Result<Judgement, ModelError> {
        let text = self.chat(&judge_prompt(request), Some(request.seed))?;
        let first = text.split_whitespace().next().unwrap_or("");
        let holds = crate::value::parse_bool(first.trim_matches(|c: char| !c.is_alphanumeric()))
            .ok_or_else(|| ModelError::Malformed(format!("judge answered `{text}`")))?;
        Ok(Judgement {
            holds,
            confidence: None,
            rationale: text,
            cost: self.config.cost_per_call,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automata::Dfa;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// Serves one canned response and returns the request it received.
    fn serve_once(status: &str, body: &str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let reply = format!(
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        );
        let handle = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = s.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(i) = text.find("\r\n\r\n") {
                    let len = text[..i]
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if buf.len() >= i + 4 + len {
                        break;
                    }
                }
            }
            s.write_all(reply.as_bytes()).unwrap();
            String::from_utf8_lossy(&buf).into_owned()
        });
        (url, handle)
    }

    fn client(url: String) -> HttpModel {
        HttpModel::new(HttpConfig {
            endpoint: url,
            model: "m1".into(),
            api_key_env: None,
            timeout_secs: 5,
            cost_per_call: 2.0,
        })
    }

    #[test]
    fn posts_chat_body_and_reads_content() {
        let (url, h) = serve_once("200 OK", r#"{"choices":[{"message":{"role":"assistant","content":"1985-03-12"}}]}"#);
        let mut r = ModelRequest::new("dob", "canonicalize");
        r.seed = 9;
        let resp = client(url).complete(&r).unwrap();
        assert_eq!(resp.text, "1985-03-12");
        assert_eq!(resp.cost, 2.0);
        let raw = h.join().unwrap();
        let body: serde_json::Value = serde_json::from_str(raw.split("\r\n\r\n").nth(1).unwrap()).unwrap();
        assert_eq!(body["model"], "m1");
        assert_eq!(body["seed"], 9);
        assert_eq!(body["messages"][0]["content"], "canonicalize");
    }

    #[test]
    fn server_errors_are_transport_class() {
        let (url, h) = serve_once("503 Service Unavailable", "{}");
        let err = client(url).complete(&ModelRequest::new("x", "p")).unwrap_err();
        h.join().unwrap();
        assert_eq!(err, ModelError::Status(503, "request rejected".into()));
        assert!(err.is_transport());
    }

    #[test]
    fn judge_parses_leading_boolean() {
        let (url, h) = serve_once("200 OK", r#"{"choices":[{"message":{"content":"False. The claim is absent."}}]}"#);
        let j = client(url)
            .judge(&JudgeRequest {
                mode: JudgeMode::FactCheck,
                task: String::new(),
                input: "a".into(),
                output: "b".into(),
                seed: 0,
            })
            .unwrap();
        h.join().unwrap();
        assert!(!j.holds);
        assert_eq!(j.confidence, None);
    }

    #[test]
    fn masks_are_unsupported() {
        let m = client("http://127.0.0.1:9/".into());
        let d = Dfa::from_regex("a").unwrap();
        assert!(matches!(
            m.complete_constrained(&ModelRequest::new("x", "p"), &d),
            Err(ModelError::Unsupported(_))
        ));
        assert!(!m.token_level());
    }
}

//! Client for OpenAI-compatible `chat/completions` endpoints (vLLM, llama.cpp
//! server, Ollama and similar), used as external caption and reformulation
//! backends. Plain HTTP only.

use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backend::{render_reformulation_prompt, CaptionBackend, ReformulationBackend, CAPTION_PROMPT};
use crate::data::ImageRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpBackendConfig {
    /// Full URL of the chat completions route.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    3
}

#[derive(Debug, Clone)]
pub struct ChatClient {
    cfg: HttpBackendConfig,
    agent: ureq::Agent,
    id: String,
}

impl ChatClient {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self> {
        if !cfg.endpoint.starts_with("http://") {
            return Err(Error::InvalidConfig(format!(
                "endpoint `{}` must be an http:// URL",
                cfg.endpoint
            )));
        }
        if cfg.model.is_empty() {
            return Err(Error::InvalidConfig("backend model name is empty".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .build()
            .into();
        let id = format!("http:{}", cfg.model);
        Ok(Self { cfg, agent, id })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn post_once(&self, content: &Value) -> std::result::Result<String, String> {
        let mut body = json!({
            "model": self.cfg.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": content }],
        });
        if let Some(n) = self.cfg.max_tokens {
            body["max_tokens"] = json!(n);
        }
        let mut resp = self
            .agent
            .post(&self.cfg.endpoint)
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        let parsed: Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("response without choices[0].message.content: {parsed}"))
    }

    /// Sends one user message, retrying up to `max_retries` extra times.
    pub fn complete(&self, content: Value) -> Result<String> {
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            match self.post_once(&content) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("{} attempt {} failed: {e}", self.id, attempt + 1);
                    last = e;
                    if attempt < self.cfg.max_retries {
                        std::thread::sleep(Duration::from_millis(200 * (1 << attempt.min(5))));
                    }
                }
            }
        }
        Err(Error::BackendUnavailable {
            backend: self.id.clone(),
            reason: format!("{} attempts failed, last error: {last}", self.cfg.max_retries + 1),
        })
    }
}

pub fn png_bytes(image: &ImageRecord) -> Result<Vec<u8>> {
    let (h, w, c) = image.shape();
    let channels: Vec<u8> = image
        .pixels
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let dynimg = match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, channels).map(image::DynamicImage::from),
        3 => image::RgbImage::from_raw(w as u32, h as u32, channels).map(image::DynamicImage::from),
        _ => None,
    }
    .ok_or_else(|| Error::ShapeMismatch(format!("cannot encode {c}-channel image as PNG")))?;
    let mut out = Cursor::new(Vec::new());
    dynimg
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::format("png", e.to_string()))?;
    Ok(out.into_inner())
}

pub fn png_data_url(image: &ImageRecord) -> Result<String> {
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png_bytes(image)?)
    ))
}

#[derive(Debug, Clone)]
pub struct HttpCaptioner(pub ChatClient);

impl CaptionBackend for HttpCaptioner {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn caption(&self, image: &ImageRecord) -> Result<String> {
        let content = json!([
            { "type": "text", "text": CAPTION_PROMPT },
            { "type": "image_url", "image_url": { "url": png_data_url(image)? } },
        ]);
        self.0.complete(content)
    }
}

#[derive(Debug, Clone)]
pub struct HttpReformulator(pub ChatClient);

impl ReformulationBackend for HttpReformulator {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn reformulate(&self, caption_a: &str, caption_b: &str) -> Result<String> {
        let prompt = render_reformulation_prompt(caption_a, caption_b)?;
        self.0.complete(Value::String(prompt))
    }
}

use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde_json::{json, Value};

use super::wire::{read_frame, write_frame, WireRequest, WireResponse, WireStatus, WIRE_VERSION};
use super::{EmbeddingVector, GatewayError, Role};
use crate::corpus::ImageRecord;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
const IO_TIMEOUT: Duration = Duration::from_secs(300);

/// Client for one remote endpoint (`tcp://host:port` or `host:port`). Every
/// call opens a connection, sends one request frame and reads one reply.
#[derive(Debug, Clone)]
pub struct RemoteClient {
    endpoint: String,
    address: String,
}

impl RemoteClient {
    pub fn new(endpoint: &str) -> Result<Self, GatewayError> {
        let address = endpoint.trim().strip_prefix("tcp://").unwrap_or(endpoint.trim()).to_string();
        if address.is_empty() || !address.contains(':') {
            return Err(GatewayError::Config(format!("endpoint {endpoint:?} is not host:port")));
        }
        Ok(Self { endpoint: endpoint.to_string(), address })
    }

    fn unreachable(&self, reason: impl ToString) -> GatewayError {
        GatewayError::Unreachable { endpoint: self.endpoint.clone(), reason: reason.to_string() }
    }

    fn resolve(&self) -> Result<SocketAddr, GatewayError> {
        self.address
            .to_socket_addrs()
            .map_err(|e| self.unreachable(e))?
            .next()
            .ok_or_else(|| self.unreachable("address resolved to nothing"))
    }

    fn call(&self, role: Role, operation: &str, payload: Value) -> Result<Value, GatewayError> {
        let addr = self.resolve()?;
        let mut stream =
            TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT).map_err(|e| self.unreachable(e))?;
        stream.set_read_timeout(Some(IO_TIMEOUT)).map_err(|e| self.unreachable(e))?;
        stream.set_write_timeout(Some(IO_TIMEOUT)).map_err(|e| self.unreachable(e))?;
        let req = WireRequest { version: WIRE_VERSION, role, operation: operation.to_string(), payload };
        write_frame(&mut stream, &req)?;
        let resp: WireResponse = read_frame(&mut stream)?;
        match resp.status {
            WireStatus::Ok => Ok(resp.payload),
            WireStatus::Error => Err(GatewayError::Remote(
                resp.payload.as_str().map(str::to_string).unwrap_or_else(|| resp.payload.to_string()),
            )),
        }
    }

    fn text_reply(value: Value) -> Result<String, GatewayError> {
        value
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Protocol(format!("expected a string payload, got {value}")))
    }

    fn vector_reply(value: Value) -> Result<EmbeddingVector, GatewayError> {
        let values: Vec<f32> = serde_json::from_value(value)
            .map_err(|e| GatewayError::Protocol(format!("expected a float array: {e}")))?;
        EmbeddingVector::new(values)
    }

    fn image_payload(image: &ImageRecord) -> Value {
        json!({ "id": image.id, "uri": image.uri })
    }

    pub fn complete(&self, prompt: &str, max_tokens: usize) -> Result<String, GatewayError> {
        let v = self.call(Role::Llm, "complete", json!({ "prompt": prompt, "max_tokens": max_tokens }))?;
        Self::text_reply(v)
    }

    pub fn vqa_answer(&self, image: &ImageRecord, question: &str) -> Result<String, GatewayError> {
        let payload = json!({ "image": Self::image_payload(image), "question": question });
        Self::text_reply(self.call(Role::Vqa, "vqa_answer", payload)?)
    }

    pub fn caption(&self, image: &ImageRecord) -> Result<String, GatewayError> {
        let payload = json!({ "image": Self::image_payload(image) });
        Self::text_reply(self.call(Role::Captioner, "caption", payload)?)
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        Self::vector_reply(self.call(Role::Embedder, "embed_text", json!({ "text": text }))?)
    }

    pub fn embed_image(&self, image: &ImageRecord) -> Result<EmbeddingVector, GatewayError> {
        let payload = json!({ "image": Self::image_payload(image) });
        Self::vector_reply(self.call(Role::Embedder, "embed_image", payload)?)
    }
}

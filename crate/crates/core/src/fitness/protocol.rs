//! Wire messages of the external evaluator protocol: one JSON object per
//! line over the evaluator's standard input and output.
//!
//! ```text
//! engine    → evaluator  {"type":"hello","version":1,"snapshot_sha256":"<hex>"}
//! evaluator → engine     {"type":"ready","version":1}
//! engine    → evaluator  {"type":"eval","id":3,"finetune_epochs":3,"masks":{"conv1":[1,0,1]}}
//! evaluator → engine     {"type":"result","id":3,"fitness":0.71}
//!                      | {"type":"error","id":3,"message":"..."}
//! engine    → evaluator  {"type":"bye"}
//! ```
//!
//! Unknown fields are ignored.

use serde::{Deserialize, Serialize};

use crate::snapshot::Mask;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum EngineMessage {
    Hello { version: u32, snapshot_sha256: String },
    Eval {
        id: u64,
        finetune_epochs: usize,
        masks: serde_json::Map<String, serde_json::Value>,
    },
    Bye,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum EvaluatorMessage {
    Ready { version: u32 },
    Result { id: u64, fitness: f64 },
    Error { id: u64, message: String },
}

impl EngineMessage {
    pub fn eval(id: u64, finetune_epochs: usize, masks: &Mask) -> Self {
        let serde_json::Value::Object(masks) = masks.to_json() else {
            unreachable!("mask JSON is always an object")
        };
        EngineMessage::Eval {
            id,
            finetune_epochs,
            masks,
        }
    }

    /// Serialized form terminated by a newline.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("engine messages always serialize");
        s.push('\n');
        s
    }
}

impl EvaluatorMessage {
    pub fn parse(line: &str) -> Result<Self, String> {
        serde_json::from_str(line.trim()).map_err(|e| e.to_string())
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("evaluator messages always serialize");
        s.push('\n');
        s
    }
}

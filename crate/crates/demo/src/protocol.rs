//! Wire format: one JSON object per WebSocket text message, discriminated by `type`.

use serde::{Deserialize, Serialize};

/// Client → server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    /// Fresh uniform permutation from the next step on.
    Shuffle,
    /// Hide these channels (indices before permutation); an empty list shows all.
    Occlude { indices: Vec<usize> },
    /// Append `count` Gaussian noise channels (continuous agents only).
    Noise { count: usize, sigma: f64 },
    Pause,
    Resume,
    StepOnce,
    /// New episode; the next seed of the session stream unless given.
    Reset {
        #[serde(default)]
        seed: Option<u64>,
    },
    SetSpeed { hz: f64 },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Shuffle => "shuffle",
            Command::Occlude { .. } => "occlude",
            Command::Noise { .. } => "noise",
            Command::Pause => "pause",
            Command::Resume => "resume",
            Command::StepOnce => "step_once",
            Command::Reset { .. } => "reset",
            Command::SetSpeed { .. } => "set_speed",
        }
    }
}

pub fn parse_command(text: &str) -> Result<Command, String> {
    serde_json::from_str(text).map_err(|e| format!("bad command: {e}"))
}

/// Binary image, row-major, one byte per pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub episode: u64,
    /// Environment steps completed; 0 for the frame sent at reset.
    pub step: usize,
    pub action: Option<f64>,
    pub reward: f64,
    pub score: f64,
    pub done: bool,
    pub paused: bool,
    /// `observation[i]` is pre-permutation channel `visible[permutation[i]]`.
    pub permutation: Vec<usize>,
    pub visible: Vec<usize>,
    /// Unperturbed channels: scalars for CartPole, mean patch intensity for MiniPong.
    pub raw: Vec<f64>,
    /// What the agent saw, in the same summary form.
    pub observation: Vec<f64>,
    pub latent: Vec<f64>,
    pub latent_shape: [usize; 2],
    /// Distinct channels that are the argmax of some attention row, in observation order.
    pub attended: Vec<usize>,
    /// Latest MiniPong frame on every 5th step.
    pub image: Option<Image>,
    /// Frames dropped so far because the client fell behind.
    pub dropped: u64,
}

/// Server → client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Session {
        session_id: u64,
        agent: String,
        variant: String,
        env: String,
        hz: f64,
        paused: bool,
    },
    Frame(Frame),
    Ack {
        command: String,
        detail: serde_json::Value,
    },
    Error {
        message: String,
    },
    /// The session could not be opened; the socket closes after this.
    Refused {
        reason: String,
    },
}

impl Message {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }

    pub fn is_frame(&self) -> bool {
        matches!(self, Message::Frame(_))
    }
}

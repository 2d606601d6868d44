//! Oracle adapters. The verifier sees exactly one capability: query an
//! image, get a probability vector. The in-process adapter wraps a
//! [`ModelState`]; the subprocess adapter speaks line-delimited JSON over
//! stdin/stdout so external models can be verified.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::tensor::Tensor;

/// Black-box model access: one query capability, nothing else.
pub trait ModelOracle {
    /// Probability vector of length K for one `[C,H,W]` image.
    fn query(&self, image: &Tensor) -> Result<Vec<f64>>;
}

/// Adapter over an in-process model.
pub struct InProcessOracle {
    model: ModelState,
}

impl InProcessOracle {
    pub fn new(model: ModelState) -> Self {
        InProcessOracle { model }
    }
}

impl ModelOracle for InProcessOracle {
    fn query(&self, image: &Tensor) -> Result<Vec<f64>> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::Protocol(format!("query expects [C,H,W], got {s:?}")));
        }
        let batch = image.reshaped(&[1, s[0], s[1], s[2]])?;
        let probs = self.model.forward(&batch)?;
        Ok(probs.data().to_vec())
    }
}

/// One request line: flattened image plus its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub image: Vec<f64>,
    pub shape: [usize; 3],
}

/// One response line: K probabilities (or an error to surface).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OracleResponse {
    Ok { probs: Vec<f64> },
    Err { error: String },
}

/// Adapter over an external process speaking the line-delimited JSON
/// protocol. The child is killed on drop.
pub struct SubprocessOracle {
    child: Mutex<OracleChild>,
}

struct OracleChild {
    process: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl SubprocessOracle {
    /// Spawn `program args...`; the process must answer one JSON response
    /// line per JSON request line.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut process = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Protocol(format!("failed to spawn oracle `{program}`: {e}")))?;
        let stdin = process
            .stdin
            .take()
            .ok_or_else(|| Error::Protocol("oracle stdin unavailable".into()))?;
        let stdout = BufReader::new(
            process
                .stdout
                .take()
                .ok_or_else(|| Error::Protocol("oracle stdout unavailable".into()))?,
        );
        Ok(SubprocessOracle {
            child: Mutex::new(OracleChild {
                process,
                stdin,
                stdout,
            }),
        })
    }
}

impl ModelOracle for SubprocessOracle {
    fn query(&self, image: &Tensor) -> Result<Vec<f64>> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::Protocol(format!("query expects [C,H,W], got {s:?}")));
        }
        let request = OracleRequest {
            image: image.data().to_vec(),
            shape: [s[0], s[1], s[2]],
        };
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');

        let mut child = self.child.lock().expect("oracle lock");
        child
            .stdin
            .write_all(line.as_bytes())
            .map_err(|e| Error::Protocol(format!("oracle write failed: {e}")))?;
        child
            .stdin
            .flush()
            .map_err(|e| Error::Protocol(format!("oracle flush failed: {e}")))?;

        let mut response = String::new();
        let n = child
            .stdout
            .read_line(&mut response)
            .map_err(|e| Error::Protocol(format!("oracle read failed: {e}")))?;
        if n == 0 {
            return Err(Error::Protocol("oracle closed its stdout".into()));
        }
        match serde_json::from_str::<OracleResponse>(response.trim()) {
            Ok(OracleResponse::Ok { probs }) => Ok(probs),
            Ok(OracleResponse::Err { error }) => Err(Error::Protocol(format!(
                "oracle reported an error: {error}"
            ))),
            Err(e) => Err(Error::Protocol(format!(
                "malformed oracle response `{}`: {e}",
                response.trim()
            ))),
        }
    }
}

impl Drop for SubprocessOracle {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.process.kill();
            let _ = child.process.wait();
        }
    }
}

/// Serve the oracle protocol over stdio for a model (the other side of
/// [`SubprocessOracle`]); used by the CLI `oracle` subcommand.
pub fn serve_oracle(
    model: &ModelState,
    input: &mut dyn BufRead,
    output: &mut dyn Write,
) -> Result<()> {
    let mut line = String::new();
    loop {
        line.clear();
        let n = input
            .read_line(&mut line)
            .map_err(|e| Error::Protocol(format!("read failed: {e}")))?;
        if n == 0 {
            return Ok(()); // peer closed
        }
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<OracleRequest>(line.trim()) {
            Ok(req) => match answer(model, &req) {
                Ok(probs) => OracleResponse::Ok { probs },
                Err(e) => OracleResponse::Err {
                    error: e.to_string(),
                },
            },
            Err(e) => OracleResponse::Err {
                error: format!("malformed request: {e}"),
            },
        };
        let mut out = serde_json::to_string(&reply)?;
        out.push('\n');
        output
            .write_all(out.as_bytes())
            .map_err(|e| Error::Protocol(format!("write failed: {e}")))?;
        output
            .flush()
            .map_err(|e| Error::Protocol(format!("flush failed: {e}")))?;
    }
}

fn answer(model: &ModelState, req: &OracleRequest) -> Result<Vec<f64>> {
    let [c, h, w] = req.shape;
    let image = Tensor::new(vec![c, h, w], req.image.clone())?;
    InProcessOracle::new(model.clone()).query(&image)
}

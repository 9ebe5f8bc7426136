//! Append-only run log written as line-delimited JSON events.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde_json::{Map, Value};

enum Sink {
    Discard,
    Memory(Vec<Value>),
    File(BufWriter<File>),
}

pub struct RunLog {
    sink: Mutex<Sink>,
}

impl std::fmt::Debug for RunLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("RunLog")
    }
}

impl Default for RunLog {
    fn default() -> Self {
        Self::discard()
    }
}

impl RunLog {
    pub fn discard() -> Self {
        Self {
            sink: Mutex::new(Sink::Discard),
        }
    }

    /// Keeps events in memory; see [`RunLog::events`].
    pub fn memory() -> Self {
        Self {
            sink: Mutex::new(Sink::Memory(Vec::new())),
        }
    }

    pub fn to_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = File::create(path)?;
        Ok(Self {
            sink: Mutex::new(Sink::File(BufWriter::new(file))),
        })
    }

    /// Records `{"event": kind, ...fields}`. Non-object `fields` are stored
    /// under `"data"`.
    pub fn event(&self, kind: &str, fields: Value) {
        let mut obj = Map::new();
        obj.insert("event".into(), Value::String(kind.into()));
        match fields {
            Value::Object(m) => obj.extend(m),
            Value::Null => {}
            other => {
                obj.insert("data".into(), other);
            }
        }
        let value = Value::Object(obj);
        let mut sink = self.sink.lock().unwrap_or_else(|e| e.into_inner());
        match &mut *sink {
            Sink::Discard => {}
            Sink::Memory(events) => events.push(value),
            Sink::File(w) => {
                // A failing log must not abort the run.
                let _ = serde_json::to_writer(&mut *w, &value);
                let _ = w.write_all(b"\n");
            }
        }
    }

    pub fn events(&self) -> Vec<Value> {
        match &*self.sink.lock().unwrap_or_else(|e| e.into_inner()) {
            Sink::Memory(events) => events.clone(),
            _ => Vec::new(),
        }
    }

    pub fn flush(&self) {
        if let Sink::File(w) = &mut *self.sink.lock().unwrap_or_else(|e| e.into_inner()) {
            let _ = w.flush();
        }
    }
}

impl Drop for RunLog {
    fn drop(&mut self) {
        self.flush();
    }
}

//! JSON-lines logger on stderr. Messages that are themselves JSON objects are
//! merged into the record; anything else lands under `message`.

use std::io::Write;

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::{json, Value};

struct JsonLogger;

impl Log for JsonLogger {
    fn enabled(&self, m: &Metadata) -> bool {
        m.level() <= Level::Info
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let text = record.args().to_string();
        let mut out = json!({"level": record.level().as_str().to_lowercase()});
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(fields)) => out.as_object_mut().expect("object").extend(fields),
            _ => {
                out["message"] = Value::String(text);
            }
        }
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{out}");
    }

    fn flush(&self) {}
}

static LOGGER: JsonLogger = JsonLogger;

pub fn init() {
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(LevelFilter::Info);
    }
}

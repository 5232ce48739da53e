//! Narration of detected signs: per-class cooldown, localized message
//! templates, a drop-oldest event queue and pluggable speech backends.
//!
//! The detection loop only ever calls [`EventSender::push`], which never
//! waits on the consumer. A worker thread drains the queue into a
//! [`SpeechBackend`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};

use thiserror::Error;

use crate::decode::Detection;

pub const DEFAULT_LOCALE: &str = "en";
pub const DEFAULT_COOLDOWN_MS: u64 = 5000;
pub const SIGN_PLACEHOLDER: &str = "{sign}";

const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.tsv");

#[derive(Debug, Error)]
pub enum NarrationError {
    #[error("no template for class {class_name:?} in locale {locale:?} or the {DEFAULT_LOCALE:?} fallback")]
    MissingTemplate { locale: String, class_name: String },
    #[error("template file line {line}: {message}")]
    TemplateParse { line: usize, message: String },
    #[error("invalid narration policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("speech backend I/O: {0}")]
    Io(#[from] io::Error),
    #[error("speech command exited with {0}")]
    ExitStatus(std::process::ExitStatus),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NarrationPolicy {
    /// Minimum gap between two announcements of the same class.
    pub cooldown_ms: u64,
    pub min_score: f64,
    pub locale: String,
    pub queue_capacity: usize,
}

impl Default for NarrationPolicy {
    fn default() -> Self {
        Self {
            cooldown_ms: DEFAULT_COOLDOWN_MS,
            min_score: 0.5,
            locale: DEFAULT_LOCALE.to_string(),
            queue_capacity: 8,
        }
    }
}

impl NarrationPolicy {
    pub fn validate(&self) -> Result<(), NarrationError> {
        if self.queue_capacity == 0 {
            return Err(NarrationError::Policy("queue capacity must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(NarrationError::Policy(format!(
                "min score {} outside [0, 1]",
                self.min_score
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NarrationEvent {
    pub class_id: usize,
    pub class_name: String,
    pub message: String,
    pub frame_index: u64,
    pub timestamp_ms: u64,
}

/// Last announcement time per class. Owned by the detection loop.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CooldownState {
    last_announced: BTreeMap<usize, u64>,
}

impl CooldownState {
    pub fn last_announced(&self, class_id: usize) -> Option<u64> {
        self.last_announced.get(&class_id).copied()
    }
}

/// Classes in this frame that should be announced now, ascending.
///
/// A class qualifies when its best score reaches `min_score` and it was
/// never announced or was last announced at least `cooldown_ms` ago.
/// Announced classes get their timestamp set to `now_ms`.
pub fn filter_new_detections(
    frame_dets: &[Detection],
    state: &mut CooldownState,
    policy: &NarrationPolicy,
    now_ms: u64,
) -> Vec<usize> {
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for d in frame_dets {
        let e = best.entry(d.class_id).or_insert(f64::NEG_INFINITY);
        *e = e.max(d.score);
    }
    let mut announce = Vec::new();
    for (class_id, score) in best {
        if score < policy.min_score {
            continue;
        }
        let due = match state.last_announced.get(&class_id) {
            None => true,
            Some(&last) => now_ms.saturating_sub(last) >= policy.cooldown_ms,
        };
        if due {
            state.last_announced.insert(class_id, now_ms);
            announce.push(class_id);
        }
    }
    announce
}

/// Message templates keyed by `(locale, class_name)`; class `*` is the
/// locale default.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateTable {
    entries: HashMap<(String, String), String>,
}

impl TemplateTable {
    /// Parse `locale<TAB>class_name<TAB>template` lines.
    pub fn parse(text: &str) -> Result<Self, NarrationError> {
        let mut entries = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            match (fields.next(), fields.next(), fields.next()) {
                (Some(locale), Some(class), Some(template)) if !template.trim().is_empty() => {
                    entries.insert(
                        (locale.trim().to_string(), class.trim().to_string()),
                        template.trim().to_string(),
                    );
                }
                _ => {
                    return Err(NarrationError::TemplateParse {
                        line: n + 1,
                        message: "expected locale<TAB>class_name<TAB>template".into(),
                    })
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self, NarrationError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// The bundled table (English, plus German and French defaults).
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled template table")
    }

    pub fn insert(&mut self, locale: &str, class_name: &str, template: &str) {
        self.entries
            .insert((locale.to_string(), class_name.to_string()), template.to_string());
    }

    fn get(&self, locale: &str, class_name: &str) -> Option<&str> {
        self.entries
            .get(&(locale.to_string(), class_name.to_string()))
            .map(String::as_str)
    }
}

/// Lookup order: exact entry, locale default, then the same two in the
/// default locale.
pub fn render_message(class_name: &str, locale: &str, templates: &TemplateTable) -> Result<String, NarrationError> {
    let template = [locale, DEFAULT_LOCALE]
        .iter()
        .find_map(|loc| templates.get(loc, class_name).or_else(|| templates.get(loc, "*")))
        .ok_or_else(|| NarrationError::MissingTemplate {
            locale: locale.to_string(),
            class_name: class_name.to_string(),
        })?;
    Ok(template.replace(SIGN_PLACEHOLDER, class_name))
}

/// Cooldown filtering plus message rendering for one detection stream.
#[derive(Debug, Clone)]
pub struct Narrator {
    policy: NarrationPolicy,
    templates: TemplateTable,
    class_names: Vec<String>,
    state: CooldownState,
}

impl Narrator {
    pub fn new(
        policy: NarrationPolicy,
        templates: TemplateTable,
        class_names: Vec<String>,
    ) -> Result<Self, NarrationError> {
        policy.validate()?;
        Ok(Self {
            policy,
            templates,
            class_names,
            state: CooldownState::default(),
        })
    }

    pub fn policy(&self) -> &NarrationPolicy {
        &self.policy
    }

    pub fn class_name(&self, class_id: usize) -> String {
        self.class_names
            .get(class_id)
            .cloned()
            .unwrap_or_else(|| class_id.to_string())
    }

    pub fn observe(
        &mut self,
        frame_index: u64,
        frame_dets: &[Detection],
        now_ms: u64,
    ) -> Result<Vec<NarrationEvent>, NarrationError> {
        filter_new_detections(frame_dets, &mut self.state, &self.policy, now_ms)
            .into_iter()
            .map(|class_id| {
                let class_name = self.class_name(class_id);
                let message = render_message(&class_name, &self.policy.locale, &self.templates)?;
                Ok(NarrationEvent {
                    class_id,
                    class_name,
                    message,
                    frame_index,
                    timestamp_ms: now_ms,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Enqueued {
    Accepted,
    /// The queue was full; this oldest event was evicted to make room.
    Evicted(NarrationEvent),
}

#[derive(Debug)]
struct QueueState {
    events: VecDeque<NarrationEvent>,
    closed: bool,
}

#[derive(Debug)]
struct Shared {
    capacity: usize,
    state: Mutex<QueueState>,
    ready: Condvar,
}

/// Producer half of the narration queue. Dropping it closes the queue.
#[derive(Debug)]
pub struct EventSender {
    shared: Arc<Shared>,
}

/// Consumer half of the narration queue.
#[derive(Debug)]
pub struct EventReceiver {
    shared: Arc<Shared>,
}

/// Bounded single-producer single-consumer queue that evicts its oldest
/// entry instead of blocking when full.
pub fn event_queue(capacity: usize) -> (EventSender, EventReceiver) {
    assert!(capacity >= 1, "queue capacity must be at least 1");
    let shared = Arc::new(Shared {
        capacity,
        state: Mutex::new(QueueState {
            events: VecDeque::with_capacity(capacity),
            closed: false,
        }),
        ready: Condvar::new(),
    });
    (
        EventSender {
            shared: Arc::clone(&shared),
        },
        EventReceiver { shared },
    )
}

impl EventSender {
    /// Never blocks on the consumer; the lock is only held for O(1) work.
    pub fn push(&self, ev: NarrationEvent) -> Enqueued {
        let mut st = self.shared.state.lock().unwrap_or_else(|e| e.into_inner());
        let outcome = if st.events.len() >= self.shared.capacity {
            Enqueued::Evicted(st.events.pop_front().expect("full queue is non-empty"))
        } else {
            Enqueued::Accepted
        };
        st.events.push_back(ev);
        drop(st);
        self.shared.ready.notify_one();
        outcome
    }

    pub fn len(&self) -> usize {
        self.shared.state.lock().unwrap_or_else(|e| e.into_inner()).events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Drop for EventSender {
    fn drop(&mut self) {
        self.shared.state.lock().unwrap_or_else(|e| e.into_inner()).closed = true;
        self.shared.ready.notify_all();
    }
}

impl EventReceiver {
    /// Next event in FIFO order; `None` once the sender is gone and the
    /// queue is drained.
    pub fn recv(&self) -> Option<NarrationEvent> {
        let mut st = self.shared.state.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if let Some(ev) = st.events.pop_front() {
                return Some(ev);
            }
            if st.closed {
                return None;
            }
            st = self.shared.ready.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn try_recv(&self) -> Option<NarrationEvent> {
        self.shared
            .state
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .events
            .pop_front()
    }
}

pub trait SpeechBackend: Send {
    fn speak(&mut self, ev: &NarrationEvent) -> Result<(), BackendError>;
}

impl<B: SpeechBackend + ?Sized> SpeechBackend for Box<B> {
    fn speak(&mut self, ev: &NarrationEvent) -> Result<(), BackendError> {
        (**self).speak(ev)
    }
}

/// Writes `ts_ms<TAB>class_name<TAB>message` lines.
#[derive(Debug)]
pub struct TextSink<W> {
    out: W,
}

impl<W: Write + Send> TextSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> SpeechBackend for TextSink<W> {
    fn speak(&mut self, ev: &NarrationEvent) -> Result<(), BackendError> {
        writeln!(self.out, "{}\t{}\t{}", ev.timestamp_ms, ev.class_name, ev.message)?;
        self.out.flush()?;
        Ok(())
    }
}

/// Shared in-memory sink, handy for reading back what a worker wrote.
#[derive(Debug, Clone, Default)]
pub struct SharedBuffer(pub Arc<Mutex<Vec<u8>>>);

impl SharedBuffer {
    pub fn contents(&self) -> String {
        String::from_utf8_lossy(&self.0.lock().unwrap_or_else(|e| e.into_inner())).into_owned()
    }
}

impl Write for SharedBuffer {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Runs `program args... <message>` once per event, e.g. `espeak` or a
/// wrapper around a cloud TTS client.
#[derive(Debug, Clone)]
pub struct CommandBackend {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandBackend {
    /// Split a command line on whitespace into program and arguments.
    pub fn from_command_line(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace().map(String::from);
        let program = parts.next()?;
        Some(Self {
            program,
            args: parts.collect(),
        })
    }
}

impl SpeechBackend for CommandBackend {
    fn speak(&mut self, ev: &NarrationEvent) -> Result<(), BackendError> {
        let status = Command::new(&self.program).args(&self.args).arg(&ev.message).status()?;
        if status.success() {
            Ok(())
        } else {
            Err(BackendError::ExitStatus(status))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerStats {
    pub spoken: usize,
    pub failed: usize,
}

/// Drain `rx` into `backend` on a new thread until the sender is dropped.
/// Backend failures are logged and counted.
pub fn spawn_worker<B: SpeechBackend + 'static>(rx: EventReceiver, mut backend: B) -> JoinHandle<WorkerStats> {
    thread::Builder::new()
        .name("narration".into())
        .spawn(move || {
            let mut stats = WorkerStats::default();
            while let Some(ev) = rx.recv() {
                match backend.speak(&ev) {
                    Ok(()) => stats.spoken += 1,
                    Err(e) => {
                        log::warn!("narration of {:?} failed: {e}", ev.class_name);
                        stats.failed += 1;
                    }
                }
            }
            stats
        })
        .expect("spawn narration worker")
}

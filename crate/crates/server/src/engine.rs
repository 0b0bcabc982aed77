//! Single generation worker with a bounded FIFO queue.

use std::ops::ControlFlow;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::thread;

use pocketlm_core::{Generation, Model, ModelError, SamplerParams, Session, StopConditions, TokenId};
use tokio::sync::{mpsc as tmpsc, OwnedSemaphorePermit, Semaphore};

/// Progress of one queued generation.
#[derive(Debug)]
pub enum EngineEvent {
    /// Newly visible completion text.
    Delta(String),
    Done(Finished),
    Failed(ModelError),
}

#[derive(Debug)]
pub struct Finished {
    pub generation: Generation,
    /// Session length after the run: prompt plus every token fed back.
    pub history_len: usize,
}

#[derive(Debug)]
pub struct Job {
    pub prompt: Vec<TokenId>,
    pub params: SamplerParams,
    pub stops: StopConditions,
}

#[derive(Debug, thiserror::Error)]
#[error("engine queue is full")]
pub struct Busy;

struct Queued {
    job: Job,
    events: tmpsc::UnboundedSender<EngineEvent>,
    _permit: OwnedSemaphorePermit,
}

/// Handle to the worker thread. Cloning shares the same worker.
#[derive(Clone)]
pub struct Engine {
    model: Arc<Model>,
    ctx: usize,
    capacity: usize,
    permits: Arc<Semaphore>,
    jobs: mpsc::Sender<Queued>,
    gate: Arc<(Mutex<bool>, Condvar)>,
    sampled: Arc<AtomicU64>,
}

impl Engine {
    /// Starts the worker. Up to `queue_len` requests wait behind the one
    /// being generated; `ctx` is the per-request context size.
    pub fn start(model: Arc<Model>, ctx: usize, queue_len: usize) -> Result<Self, ModelError> {
        let mut session = Session::with_context(&model.config, ctx)?;
        let (jobs, rx) = mpsc::channel::<Queued>();
        let gate = Arc::new((Mutex::new(false), Condvar::new()));
        let worker_model = model.clone();
        let worker_gate = gate.clone();
        let sampled = Arc::new(AtomicU64::new(0));
        let worker_sampled = sampled.clone();
        thread::Builder::new()
            .name("pocketlm-engine".into())
            .spawn(move || {
                for q in rx {
                    wait_open(&worker_gate);
                    run_job(&worker_model, &mut session, q, &worker_sampled);
                }
            })
            .expect("spawn engine thread");
        let capacity = queue_len + 1;
        Ok(Self {
            model,
            ctx,
            capacity,
            permits: Arc::new(Semaphore::new(capacity)),
            jobs,
            gate,
            sampled,
        })
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn ctx(&self) -> usize {
        self.ctx
    }

    /// Requests admitted and not yet finished, running one included.
    pub fn in_flight(&self) -> usize {
        self.capacity - self.permits.available_permits()
    }

    /// Tokens sampled over the engine's lifetime.
    pub fn tokens_sampled(&self) -> u64 {
        self.sampled.load(Ordering::Relaxed)
    }

    /// Queues a job, or fails at once when the queue is full.
    pub fn submit(&self, job: Job) -> Result<tmpsc::UnboundedReceiver<EngineEvent>, Busy> {
        let permit = self.permits.clone().try_acquire_owned().map_err(|_| Busy)?;
        let (tx, rx) = tmpsc::unbounded_channel();
        self.jobs
            .send(Queued {
                job,
                events: tx,
                _permit: permit,
            })
            .map_err(|_| Busy)?;
        Ok(rx)
    }

    /// Holds the worker before its next job. Admitted requests stay queued.
    pub fn pause(&self) {
        *self.gate.0.lock().unwrap() = true;
    }

    pub fn resume(&self) {
        *self.gate.0.lock().unwrap() = false;
        self.gate.1.notify_all();
    }
}

fn wait_open(gate: &(Mutex<bool>, Condvar)) {
    let mut paused = gate.0.lock().unwrap();
    while *paused {
        paused = gate.1.wait(paused).unwrap();
    }
}

fn run_job(model: &Model, session: &mut Session, q: Queued, sampled: &AtomicU64) {
    if q.events.is_closed() {
        return;
    }
    session.reset();
    let events = &q.events;
    let result = model.generate(session, &q.job.prompt, &q.job.params, &q.job.stops, |e| {
        // a closed channel means the client went away
        let gone = if e.text.is_empty() {
            events.is_closed()
        } else {
            events.send(EngineEvent::Delta(e.text.to_string())).is_err()
        };
        if gone {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    });
    let (event, n) = match result {
        Ok(generation) => {
            let n = generation.sampled;
            let done = EngineEvent::Done(Finished {
                generation,
                history_len: session.pos(),
            });
            (done, n)
        }
        Err(e) => (EngineEvent::Failed(e), 0),
    };
    // counted before the permit is released with `q`
    sampled.fetch_add(n as u64, Ordering::Relaxed);
    let _ = q.events.send(event);
}

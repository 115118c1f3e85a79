use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, select, unbounded, Receiver, Sender};

use super::stage::{HeadStat, Stage, Targets};
use super::trainer::{worker_err, StepInput, StepRecord, Trainer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct FwdMsg {
    batch_id: u64,
    h: Vec<Tensor>,
    targets: Targets,
}

struct BwdMsg {
    batch_id: u64,
    losses: Vec<f64>,
}

enum Report {
    Forward { stage: usize, batch_id: u64, stat: HeadStat },
    Critic { stage: usize, batch_id: u64, loss: f64 },
}

/// Batch ids sent down one link and acknowledged back up it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkLog {
    pub link: usize,
    pub forwarded: Vec<u64>,
    pub acknowledged: Vec<u64>,
}

impl LinkLog {
    /// Every forwarded batch acknowledged exactly once, nothing else.
    pub fn conserved(&self) -> bool {
        let mut f = self.forwarded.clone();
        let mut a = self.acknowledged.clone();
        f.sort_unstable();
        a.sort_unstable();
        f.windows(2).all(|w| w[0] != w[1]) && f == a
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkerStats {
    pub index: usize,
    pub forward_steps: u64,
    pub critic_steps: u64,
    pub busy: Duration,
    pub wall: Duration,
}

impl WorkerStats {
    pub fn utilization(&self) -> f64 {
        if self.wall.is_zero() {
            0.0
        } else {
            self.busy.as_secs_f64() / self.wall.as_secs_f64()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineReport {
    pub batches: u64,
    pub links: Vec<LinkLog>,
    pub workers: Vec<WorkerStats>,
}

impl PipelineReport {
    pub fn conserved(&self) -> bool {
        self.links.iter().all(LinkLog::conserved)
    }
}

struct Ports {
    fwd_rx: Receiver<FwdMsg>,
    fwd_tx: Option<Sender<FwdMsg>>,
    bwd_rx: Option<Receiver<BwdMsg>>,
    bwd_tx: Option<Sender<BwdMsg>>,
    reports: Sender<Report>,
}

fn stopped(index: usize, which: &str) -> Error {
    Error::Pipeline(format!("worker {index}: {which} worker stopped"))
}

fn run_worker(stage: &mut Stage, max_inflight: usize, ports: Ports) -> Result<(Option<LinkLog>, WorkerStats)> {
    let index = stage.index;
    let start = Instant::now();
    let mut stats = WorkerStats {
        index,
        ..Default::default()
    };
    let mut log = ports.bwd_rx.as_ref().map(|_| LinkLog {
        link: index,
        ..Default::default()
    });
    let mut outstanding = 0usize;
    let mut fwd_open = true;

    let on_forward = |stage: &mut Stage, m: FwdMsg, stats: &mut WorkerStats, log: &mut Option<LinkLog>| -> Result<()> {
        let t0 = Instant::now();
        let out = stage
            .train_forward(m.batch_id, m.h, &m.targets)
            .map_err(worker_err(index, m.batch_id))?;
        stats.busy += t0.elapsed();
        stats.forward_steps += 1;
        if let Some(tx) = &ports.bwd_tx {
            tx.send(BwdMsg {
                batch_id: m.batch_id,
                losses: out.losses,
            })
            .map_err(|_| stopped(index, "upstream"))?;
        }
        if let Some(tx) = &ports.fwd_tx {
            tx.send(FwdMsg {
                batch_id: m.batch_id,
                h: out.h,
                targets: m.targets,
            })
            .map_err(|_| stopped(index, "downstream"))?;
            log.as_mut().expect("link log").forwarded.push(m.batch_id);
        }
        let _ = ports.reports.send(Report::Forward {
            stage: index,
            batch_id: m.batch_id,
            stat: out.stat,
        });
        Ok(())
    };
    let on_backward = |stage: &mut Stage, m: BwdMsg, stats: &mut WorkerStats, log: &mut Option<LinkLog>| -> Result<()> {
        let t0 = Instant::now();
        let loss = stage
            .critic_update(m.batch_id, &m.losses)
            .map_err(worker_err(index, m.batch_id))?;
        stats.busy += t0.elapsed();
        stats.critic_steps += 1;
        log.as_mut().expect("link log").acknowledged.push(m.batch_id);
        let _ = ports.reports.send(Report::Critic {
            stage: index,
            batch_id: m.batch_id,
            loss,
        });
        Ok(())
    };

    match &ports.bwd_rx {
        None => {
            while let Ok(m) = ports.fwd_rx.recv() {
                on_forward(stage, m, &mut stats, &mut log)?;
            }
        }
        Some(bwd_rx) => loop {
            if !fwd_open || outstanding >= max_inflight {
                if outstanding == 0 {
                    break;
                }
                let m = bwd_rx.recv().map_err(|_| stopped(index, "downstream"))?;
                on_backward(stage, m, &mut stats, &mut log)?;
                outstanding -= 1;
                continue;
            }
            select! {
                recv(ports.fwd_rx) -> m => match m {
                    Ok(m) => {
                        on_forward(stage, m, &mut stats, &mut log)?;
                        outstanding += 1;
                    }
                    Err(_) => fwd_open = false,
                },
                recv(bwd_rx) -> m => {
                    let m = m.map_err(|_| stopped(index, "downstream"))?;
                    on_backward(stage, m, &mut stats, &mut log)?;
                    outstanding -= 1;
                }
            }
        },
    }
    stats.wall = start.elapsed();
    Ok((log, stats))
}

#[derive(Default)]
struct Partial {
    heads: Vec<Option<HeadStat>>,
    critics: Vec<Option<f64>>,
}

impl Partial {
    fn complete(&self) -> bool {
        self.heads.iter().all(Option::is_some) && self.critics.iter().all(Option::is_some)
    }
}

impl Trainer {
    /// Trains on `batches` with one worker thread per stage. Each worker
    /// updates its group as soon as activations arrive and trains its
    /// critic when the downstream loss for a buffered batch comes back; at
    /// most `max_inflight` batches are unacknowledged on any link. Records
    /// reach `on_record` in batch order.
    pub fn run_decoupled<I>(&mut self, batches: I, max_inflight: usize, mut on_record: impl FnMut(StepRecord)) -> Result<PipelineReport>
    where
        I: IntoIterator<Item = StepInput>,
        I::IntoIter: Send,
    {
        if max_inflight == 0 {
            return Err(Error::config("train.max_inflight", "must be at least 1"));
        }
        let n = self.stages.len();
        let first_id = self.next_batch;
        let batches = batches.into_iter();

        let (fwd_txs, fwd_rxs): (Vec<_>, Vec<_>) = (0..n).map(|_| bounded::<FwdMsg>(max_inflight)).unzip();
        let (bwd_txs, bwd_rxs): (Vec<_>, Vec<_>) = (0..n.saturating_sub(1)).map(|_| bounded::<BwdMsg>(max_inflight)).unzip();
        let (report_tx, report_rx) = unbounded::<Report>();

        let mut fwd_txs: Vec<Option<Sender<FwdMsg>>> = fwd_txs.into_iter().map(Some).collect();
        let mut bwd_txs: Vec<Option<Sender<BwdMsg>>> = bwd_txs.into_iter().map(Some).collect();
        let mut bwd_rxs: Vec<Option<Receiver<BwdMsg>>> = bwd_rxs.into_iter().map(Some).collect();
        let source_tx = fwd_txs[0].take().expect("first link");

        let mut next_emit = first_id;
        let mut partial: BTreeMap<u64, Partial> = BTreeMap::new();

        let (results, fed) = std::thread::scope(|scope| {
            let source = scope.spawn(move || {
                let mut id = first_id;
                for b in batches {
                    let msg = FwdMsg {
                        batch_id: id,
                        h: b.xs,
                        targets: b.targets,
                    };
                    if source_tx.send(msg).is_err() {
                        break;
                    }
                    id += 1;
                }
                id - first_id
            });
            let mut handles = Vec::with_capacity(n);
            for (i, (stage, fwd_rx)) in self.stages.iter_mut().zip(fwd_rxs).enumerate() {
                let ports = Ports {
                    fwd_rx,
                    fwd_tx: fwd_txs.get_mut(i + 1).and_then(Option::take),
                    bwd_rx: bwd_rxs.get_mut(i).and_then(Option::take),
                    bwd_tx: if i > 0 { bwd_txs[i - 1].take() } else { None },
                    reports: report_tx.clone(),
                };
                handles.push(scope.spawn(move || run_worker(stage, max_inflight, ports)));
            }
            drop(report_tx);

            for r in report_rx.iter() {
                let batch_id = match r {
                    Report::Forward { batch_id, .. } | Report::Critic { batch_id, .. } => batch_id,
                };
                let p = partial.entry(batch_id).or_insert_with(|| Partial {
                    heads: vec![None; n],
                    critics: vec![None; n - 1],
                });
                match r {
                    Report::Forward { stage, stat, .. } => p.heads[stage] = Some(stat),
                    Report::Critic { stage, loss, .. } => p.critics[stage] = Some(loss),
                }
                while partial.get(&next_emit).is_some_and(Partial::complete) {
                    let p = partial.remove(&next_emit).expect("present");
                    on_record(StepRecord {
                        batch_id: next_emit,
                        heads: p.heads.into_iter().map(Option::unwrap).collect(),
                        critic_losses: p.critics.into_iter().map(Option::unwrap).collect(),
                    });
                    next_emit += 1;
                }
            }
            let results: Vec<_> = handles.into_iter().map(|h| h.join().expect("worker panicked")).collect();
            (results, source.join().expect("source panicked"))
        });

        let mut report = PipelineReport {
            batches: fed,
            ..Default::default()
        };
        let mut pipeline_err = None;
        for r in results {
            match r {
                Ok((log, stats)) => {
                    report.links.extend(log);
                    report.workers.push(stats);
                }
                Err(e @ Error::Worker { .. }) => return Err(e),
                Err(e) => pipeline_err = pipeline_err.or(Some(e)),
            }
        }
        if let Some(e) = pipeline_err {
            return Err(e);
        }
        self.next_batch = first_id + fed;
        if next_emit != self.next_batch {
            return Err(Error::Pipeline(format!(
                "{} batches fed but records were emitted up to {}",
                fed,
                next_emit - first_id
            )));
        }
        Ok(report)
    }
}

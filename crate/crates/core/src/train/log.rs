use serde::Serialize;

use crate::error::{Error, Result};

/// Loss of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// `head_aux`, then pass 0 through T.
    pub per_head: Vec<f64>,
}

/// Summary written after each validated epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_pckh: Option<f64>,
}

/// Append-only training history.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    steps: Vec<StepRecord>,
    epochs: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn epochs(&self) -> &[EpochRecord] {
        &self.epochs
    }

    pub fn push_step(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if record.step <= last.step {
                return Err(Error::Contract(format!("step {} logged after step {}", record.step, last.step)));
            }
        }
        self.steps.push(record);
        Ok(())
    }

    pub fn push_epoch(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(last) = self.epochs.last() {
            if record.epoch <= last.epoch {
                return Err(Error::Contract(format!("epoch {} logged after epoch {}", record.epoch, last.epoch)));
            }
        }
        self.epochs.push(record);
        Ok(())
    }

    /// One row per step; floats use the shortest round-trip representation.
    pub fn steps_csv(&self) -> String {
        let heads = self.steps.first().map_or(0, |s| s.per_head.len());
        let mut out = String::from("step,epoch,lr,loss");
        if heads > 0 {
            out.push_str(",head_aux");
            for p in 0..heads - 1 {
                out.push_str(&format!(",pass{p}"));
            }
        }
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{}", s.step, s.epoch, s.lr, s.loss));
            for h in &s.per_head {
                out.push_str(&format!(",{h}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss,val_pckh\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.lr,
                e.train_loss,
                opt(e.val_loss),
                opt(e.val_pckh)
            ));
        }
        out
    }

    /// Parses the output of [`Self::steps_csv`] and [`Self::epochs_csv`].
    pub fn from_csv(steps: &str, epochs: &str) -> Result<Self> {
        let bad = |what: &str, line: usize| Error::Format(format!("train log: bad {what} row {line}"));
        let num = |s: &str| s.parse::<f64>().ok();
        let mut log = Self::default();
        for (i, line) in steps.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 4 {
                return Err(bad("step", i + 1));
            }
            let parse = || -> Option<StepRecord> {
                Some(StepRecord {
                    step: f[0].parse().ok()?,
                    epoch: f[1].parse().ok()?,
                    lr: num(f[2])?,
                    loss: num(f[3])?,
                    per_head: f[4..].iter().map(|s| num(s)).collect::<Option<_>>()?,
                })
            };
            log.push_step(parse().ok_or_else(|| bad("step", i + 1))?)?;
        }
        for (i, line) in epochs.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("epoch", i + 1));
            }
            let maybe = |s: &str| if s.is_empty() { Some(None) } else { num(s).map(Some) };
            let parse = || -> Option<EpochRecord> {
                Some(EpochRecord {
                    epoch: f[0].parse().ok()?,
                    lr: num(f[1])?,
                    train_loss: num(f[2])?,
                    val_loss: maybe(f[3])?,
                    val_pckh: maybe(f[4])?,
                })
            };
            log.push_epoch(parse().ok_or_else(|| bad("epoch", i + 1))?)?;
        }
        Ok(log)
    }
}

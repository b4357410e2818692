//! Closed-loop trajectory log and its CSV form.
//!
//! Solver wall times go to a separate timing table so that the trajectory
//! file of a run is bit-reproducible.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One controller sample. Errors `e_*` are reference minus true output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub qd1: f64,
    pub qd2: f64,
    pub qd3: f64,
    pub u1: f64,
    pub u2: f64,
    pub u3: f64,
    pub v: f64,
    pub z1: f64,
    pub z2: f64,
    pub py: f64,
    pub pz: f64,
    pub ref_y: f64,
    pub ref_z: f64,
    pub ref_f: f64,
    pub f_true: f64,
    pub f_pred: f64,
    pub sigma: f64,
    /// force bounds the controller enforced at the current state
    pub f_lo: f64,
    pub f_hi: f64,
    pub e_y: f64,
    pub e_z: f64,
    pub e_f: f64,
    pub in_contact: bool,
    /// disturbance torque on the disturbed joint [N·m]
    pub disturbance: f64,
    pub feasible: bool,
    pub converged: bool,
    pub held: bool,
    pub relaxation: String,
    pub iterations: usize,
    pub kkt: f64,
    pub objective: f64,
    pub max_slack: f64,
}

impl LogRow {
    pub fn epf_norm(&self) -> f64 {
        (self.e_y * self.e_y + self.e_z * self.e_z + self.e_f * self.e_f).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub t: f64,
    /// controller wall time [s]
    pub wall_time: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
    pub timing: Vec<TimingRow>,
}

fn write_rows<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(r: R) -> Result<Vec<T>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rd.deserialize().enumerate() {
        // data rows are 1-based after the header
        out.push(rec.map_err(|e| Error::Parse { row: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}

impl TrajectoryLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(&self.rows, w)
    }

    pub fn write_timing_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(&self.timing, w)
    }

    /// Reads a trajectory CSV; the timing table is left empty.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        Ok(Self { rows: read_rows(r)?, timing: Vec::new() })
    }

    pub fn read_timing_csv<R: Read>(r: R) -> Result<Vec<TimingRow>> {
        read_rows(r)
    }

    pub fn save(&self, trajectory: &Path, timing: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(trajectory)?))?;
        self.write_timing_csv(std::io::BufWriter::new(std::fs::File::create(timing)?))
    }

    pub fn load(trajectory: &Path, timing: Option<&Path>) -> Result<Self> {
        let mut log = Self::read_csv(std::fs::File::open(trajectory)?)?;
        if let Some(t) = timing {
            log.timing = Self::read_timing_csv(std::fs::File::open(t)?)?;
        }
        Ok(log)
    }
}

#[cfg(test)]
pub(crate) fn blank_row(t: f64) -> LogRow {
    LogRow {
        t,
        q1: 0.0,
        q2: 0.0,
        q3: 0.0,
        qd1: 0.0,
        qd2: 0.0,
        qd3: 0.0,
        u1: 0.0,
        u2: 0.0,
        u3: 0.0,
        v: 0.0,
        z1: -1.0,
        z2: 0.0,
        py: 0.0,
        pz: 0.0,
        ref_y: 0.0,
        ref_z: 0.0,
        ref_f: 0.0,
        f_true: 0.0,
        f_pred: 0.0,
        sigma: 0.0,
        f_lo: 0.0,
        f_hi: 6.0,
        e_y: 0.0,
        e_z: 0.0,
        e_f: 0.0,
        in_contact: true,
        disturbance: 0.0,
        feasible: true,
        converged: true,
        held: false,
        relaxation: "exact".into(),
        iterations: 1,
        kkt: 0.0,
        objective: 0.0,
        max_slack: 0.0,
    }
}

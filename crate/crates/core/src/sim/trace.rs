//! Episode traces: per-step world snapshots with the applied controls and any
//! infraction events, stored as JSON lines or a compact binary format.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose, Vec2};

use super::{
    Actor, ActorKind, Controls, EgoState, InfractionEvent, InfractionKind, SignalPhase,
};

const MAGIC: &[u8; 4] = b"mdtr";
const BINARY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: f64,
    pub ego: EgoState,
    pub actors: Vec<Actor>,
    pub signal_phases: Vec<SignalPhase>,
    pub controls: Controls,
    pub events: Vec<InfractionEvent>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
}

impl Trace {
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for step in &self.steps {
            serde_json::to_writer(&mut w, step)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Trace> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut steps = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            steps.push(serde_json::from_str(&line)?);
        }
        Ok(Trace { steps })
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(BINARY_VERSION)?;
        w.write_u64::<LittleEndian>(self.steps.len() as u64)?;
        for step in &self.steps {
            w.write_f64::<LittleEndian>(step.t)?;
            write_ego(&mut w, &step.ego)?;
            w.write_u32::<LittleEndian>(step.actors.len() as u32)?;
            for a in &step.actors {
                write_actor(&mut w, a)?;
            }
            w.write_u32::<LittleEndian>(step.signal_phases.len() as u32)?;
            for &p in &step.signal_phases {
                w.write_u8(match p {
                    SignalPhase::Red => 0,
                    SignalPhase::Green => 1,
                })?;
            }
            w.write_f64::<LittleEndian>(step.controls.steer)?;
            w.write_f64::<LittleEndian>(step.controls.accel)?;
            w.write_u32::<LittleEndian>(step.events.len() as u32)?;
            for e in &step.events {
                w.write_u8(infraction_code(e.kind))?;
                w.write_f64::<LittleEndian>(e.t)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_binary(path: &Path) -> Result<Trace> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Config(format!(
                "{}: not a binary trace file",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != BINARY_VERSION {
            return Err(Error::Config(format!(
                "unsupported trace version {version}"
            )));
        }
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            let t = r.read_f64::<LittleEndian>()?;
            let ego = read_ego(&mut r)?;
            let n_actors = r.read_u32::<LittleEndian>()? as usize;
            let mut actors = Vec::with_capacity(n_actors);
            for _ in 0..n_actors {
                actors.push(read_actor(&mut r)?);
            }
            let n_phases = r.read_u32::<LittleEndian>()? as usize;
            let mut signal_phases = Vec::with_capacity(n_phases);
            for _ in 0..n_phases {
                signal_phases.push(match r.read_u8()? {
                    0 => SignalPhase::Red,
                    1 => SignalPhase::Green,
                    c => return Err(Error::Config(format!("bad phase code {c}"))),
                });
            }
            let controls = Controls {
                steer: r.read_f64::<LittleEndian>()?,
                accel: r.read_f64::<LittleEndian>()?,
            };
            let n_events = r.read_u32::<LittleEndian>()? as usize;
            let mut events = Vec::with_capacity(n_events);
            for _ in 0..n_events {
                let kind = infraction_from_code(r.read_u8()?)?;
                let t = r.read_f64::<LittleEndian>()?;
                events.push(InfractionEvent { kind, t });
            }
            steps.push(TraceStep {
                t,
                ego,
                actors,
                signal_phases,
                controls,
                events,
            });
        }
        Ok(Trace { steps })
    }
}

fn write_pose<W: Write>(w: &mut W, p: &Pose) -> Result<()> {
    w.write_f64::<LittleEndian>(p.position.x)?;
    w.write_f64::<LittleEndian>(p.position.y)?;
    w.write_f64::<LittleEndian>(p.heading)?;
    Ok(())
}

fn read_pose<R: Read>(r: &mut R) -> Result<Pose> {
    Ok(Pose {
        position: Vec2::new(
            r.read_f64::<LittleEndian>()?,
            r.read_f64::<LittleEndian>()?,
        ),
        heading: r.read_f64::<LittleEndian>()?,
    })
}

fn write_ego<W: Write>(w: &mut W, e: &EgoState) -> Result<()> {
    write_pose(w, &e.pose)?;
    w.write_f64::<LittleEndian>(e.v)?;
    w.write_f64::<LittleEndian>(e.steer)?;
    w.write_f64::<LittleEndian>(e.wheelbase)?;
    Ok(())
}

fn read_ego<R: Read>(r: &mut R) -> Result<EgoState> {
    Ok(EgoState {
        pose: read_pose(r)?,
        v: r.read_f64::<LittleEndian>()?,
        steer: r.read_f64::<LittleEndian>()?,
        wheelbase: r.read_f64::<LittleEndian>()?,
    })
}

fn write_actor<W: Write>(w: &mut W, a: &Actor) -> Result<()> {
    w.write_u8(match a.kind {
        ActorKind::Car => 0,
        ActorKind::Cyclist => 1,
        ActorKind::Pedestrian => 2,
        ActorKind::Emergency => 3,
    })?;
    write_pose(w, &a.pose)?;
    w.write_f64::<LittleEndian>(a.v)?;
    w.write_u32::<LittleEndian>(a.script)?;
    w.write_f64::<LittleEndian>(a.extent.0)?;
    w.write_f64::<LittleEndian>(a.extent.1)?;
    w.write_u8(a.active as u8)?;
    Ok(())
}

fn read_actor<R: Read>(r: &mut R) -> Result<Actor> {
    Ok(Actor {
        kind: match r.read_u8()? {
            0 => ActorKind::Car,
            1 => ActorKind::Cyclist,
            2 => ActorKind::Pedestrian,
            3 => ActorKind::Emergency,
            c => return Err(Error::Config(format!("bad actor code {c}"))),
        },
        pose: read_pose(r)?,
        v: r.read_f64::<LittleEndian>()?,
        script: r.read_u32::<LittleEndian>()?,
        extent: (
            r.read_f64::<LittleEndian>()?,
            r.read_f64::<LittleEndian>()?,
        ),
        active: r.read_u8()? != 0,
    })
}

fn infraction_code(k: InfractionKind) -> u8 {
    match k {
        InfractionKind::LayoutCollision => 0,
        InfractionKind::OutsideLane => 1,
        InfractionKind::ActorCollision => 2,
        InfractionKind::RedLight => 3,
        InfractionKind::StopSign => 4,
        InfractionKind::RouteDeviation => 5,
        InfractionKind::Timeout => 6,
    }
}

fn infraction_from_code(c: u8) -> Result<InfractionKind> {
    Ok(match c {
        0 => InfractionKind::LayoutCollision,
        1 => InfractionKind::OutsideLane,
        2 => InfractionKind::ActorCollision,
        3 => InfractionKind::RedLight,
        4 => InfractionKind::StopSign,
        5 => InfractionKind::RouteDeviation,
        6 => InfractionKind::Timeout,
        _ => return Err(Error::Config(format!("bad infraction code {c}"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trace() -> Trace {
        let mut steps = Vec::new();
        for i in 0..5 {
            let t = i as f64 * 0.1;
            steps.push(TraceStep {
                t,
                ego: EgoState {
                    pose: Pose {
                        position: Vec2::new(t * 3.0, 0.25),
                        heading: 0.01 * i as f64,
                    },
                    v: 3.0,
                    steer: 0.02,
                    wheelbase: 2.8,
                },
                actors: vec![Actor {
                    kind: ActorKind::Cyclist,
                    pose: Pose {
                        position: Vec2::new(10.0, -1.5),
                        heading: 0.0,
                    },
                    v: 4.0,
                    script: 0,
                    extent: (0.9, 0.4),
                    active: i < 4,
                }],
                signal_phases: vec![SignalPhase::Green, SignalPhase::Red],
                controls: Controls {
                    steer: 0.02,
                    accel: 1.0,
                },
                events: if i == 3 {
                    vec![InfractionEvent {
                        kind: InfractionKind::OutsideLane,
                        t,
                    }]
                } else {
                    Vec::new()
                },
            });
        }
        Trace { steps }
    }

    #[test]
    fn jsonl_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let trace = sample_trace();
        trace.save_jsonl(&path).unwrap();
        assert_eq!(Trace::load_jsonl(&path).unwrap(), trace);
    }

    #[test]
    fn binary_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.bin");
        let trace = sample_trace();
        trace.save_binary(&path).unwrap();
        assert_eq!(Trace::load_binary(&path).unwrap(), trace);
    }

    #[test]
    fn binary_rejects_foreign_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a trace").unwrap();
        assert!(Trace::load_binary(&path).is_err());
    }
}

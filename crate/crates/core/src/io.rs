//! Plot-ready exports. Numbers use Rust's locale-independent shortest
//! round-trip formatting; columns have a fixed order.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::costs::PenaltySpec;
use crate::error::Result;
use crate::fbsde::Trajectory;

/// Header of [`write_trajectories_csv`] for `n` states and `m` controls.
pub fn trajectory_header(n: usize, m: usize) -> String {
    let mut cols = vec!["trial".to_string(), "step".into(), "t".into()];
    cols.extend((1..=n).map(|i| format!("x{i}")));
    cols.extend((1..=m).map(|i| format!("u{i}")));
    cols.extend(["y", "running_cost", "penalty", "violation_flag"].map(String::from));
    cols.join(",")
}

/// One row per `(trial, step)` with `step = 0 … N`. The final row of a trial
/// leaves the control and cost columns empty. Diverged trials are skipped.
/// `violation_flag` is 1 when the row's state breaks any constraint of `constraints`.
pub fn write_trajectories_csv(mut w: impl Write, trajectories: &[Option<Trajectory>], dt: f64, n: usize, m: usize, constraints: &PenaltySpec) -> Result<()> {
    writeln!(w, "{}", trajectory_header(n, m))?;
    for (trial, t) in trajectories.iter().enumerate() {
        let Some(t) = t else { continue };
        let steps = t.steps();
        for k in 0..=steps {
            let x = t.state(k);
            let mut row = vec![trial.to_string(), k.to_string(), (k as f64 * dt).to_string()];
            row.extend(x.iter().map(f64::to_string));
            if k < steps {
                row.extend(t.control(k).iter().map(f64::to_string));
            } else {
                row.extend(std::iter::repeat_n(String::new(), m));
            }
            row.push(t.y[k].to_string());
            if k < steps {
                row.push(t.run_cost[k].to_string());
                row.push(t.penalty[k].to_string());
            } else {
                row.extend([String::new(), String::new()]);
            }
            row.push(u8::from(!constraints.satisfied(x)).to_string());
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// `x` values evenly spaced over `[from, to]`.
pub fn linspace(from: f64, to: f64, samples: usize) -> Vec<f64> {
    match samples {
        0 => Vec::new(),
        1 => vec![from],
        _ => (0..samples).map(|i| from + (to - from) * i as f64 / (samples - 1) as f64).collect(),
    }
}

/// Rows `kind,k,x,p` for a scalar penalty `c(x) = x` at each steepness.
pub fn write_penalty_curve(mut w: impl Write, spec: &PenaltySpec, ks: &[f64], xs: &[f64]) -> Result<()> {
    writeln!(w, "kind,k,x,p")?;
    let kind = serde_json::to_value(spec.kind)?;
    let kind = kind.as_str().unwrap_or_default();
    for &k in ks {
        let s = spec.with_k(k);
        for &x in xs {
            writeln!(w, "{kind},{k},{x},{}", s.value(&[x]))?;
        }
    }
    Ok(())
}

/// Line-delimited JSON, one record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{Constraint, PenaltyKind};

    fn traj() -> Trajectory {
        Trajectory {
            state_dim: 2,
            control_dim: 1,
            x: vec![0.0, 0.0, 1.0, 2.0, 3.0, -0.5],
            y: vec![1.0, 0.5, 0.25],
            u: vec![0.1, -0.2],
            dw: vec![0.0, 0.0],
            run_cost: vec![0.3, 0.4],
            penalty: vec![0.0, 0.1],
            vx_sigma_dw: vec![0.0, 0.0],
            terminal_state: vec![3.0, -0.5],
            terminal_cost: 0.25,
            hidden: vec![],
        }
    }

    #[test]
    fn trajectory_rows_and_flags_match_the_states() {
        let spec = PenaltySpec {
            kind: PenaltyKind::Logistic,
            k: 1.0,
            max_penalty: Some(1.0),
            constraints: vec![Constraint::component(0, Some(-1.5), Some(1.5))],
        };
        let mut buf = Vec::new();
        write_trajectories_csv(&mut buf, &[Some(traj()), None, Some(traj())], 0.5, 2, 1, &spec).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "trial,step,t,x1,x2,u1,y,running_cost,penalty,violation_flag");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert_eq!(lines[1], "0,0,0,0,0,0.1,1,0.3,0,0");
        assert_eq!(lines[3], "0,2,1,3,-0.5,,0.25,,,1");
        assert!(lines[4].starts_with("2,0,"));
    }

    #[test]
    fn penalty_curve_has_one_row_per_sample() {
        let spec = PenaltySpec {
            kind: PenaltyKind::Relu,
            k: 1.0,
            max_penalty: None,
            constraints: vec![Constraint::component(0, Some(1.0), Some(5.0))],
        };
        let mut buf = Vec::new();
        write_penalty_curve(&mut buf, &spec, &[1.0, 2.0], &linspace(0.0, 6.0, 7)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 14);
        assert_eq!(lines[1], "relu,1,0,1");
        assert_eq!(lines[14], "relu,2,6,2");
    }

    #[test]
    fn linspace_hits_both_ends() {
        let v = linspace(-1.0, 1.0, 5);
        assert_eq!(v, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(linspace(0.0, 1.0, 0).is_empty());
    }
}

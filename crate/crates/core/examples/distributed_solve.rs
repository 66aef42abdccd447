//! Solves one certification program by consensus ADMM and checks it against
//! the centralized solver.

use dmpsc::certifier::{build_program, init_session, Artifacts, CertRequest, CertSettings, ProgramMode};
use dmpsc::distsolve::{compare_with_centralized, partition_program, ConsensusParams, MessageBus, run_consensus};
use dmpsc::netmodel::{build_chain_benchmark, ChainParams};
use dmpsc::terminal::TerminalOptions;
use dmpsc::tube::TubeOptions;
use nalgebra::DVector;

fn main() -> dmpsc::Result<()> {
    let model = build_chain_benchmark(&ChainParams::benchmark())?;
    let artifacts = Artifacts::synthesize(&model, &TubeOptions::default(), &TerminalOptions::default())?;
    let mut x = DVector::zeros(model.total_state_dim());
    x[2] = -0.2;
    x[3] = 0.3;
    let session = init_session(&model, &artifacts, &x, CertSettings::default())?;
    let mut u_l = DVector::zeros(model.total_input_dim());
    u_l[1] = 5.0;
    let request = CertRequest { x, u_l };

    let program = build_program(&model, &artifacts, &session, &request, ProgramMode::Certify)?;
    let partition = partition_program(&program.program, &model)?;
    println!("{} agents, {} directed copy edges", partition.agents.len(), partition.edges.len());
    println!("reassembles: {}", partition.reassembles(&program.program));

    let mut bus = MessageBus::for_model(&model);
    let params = ConsensusParams::default();
    let outcome = run_consensus(&program.program, &partition, &mut bus, &params)?;
    let t = &outcome.telemetry;
    println!("converged after {} rounds, {} messages", t.records.len(), t.total_messages);
    t.write_jsonl(std::io::stdout().lock().by_ref_lines(3))?;
    println!("messages between masses 1 and 3: {}", bus.messages_between(0, 2));

    let report = compare_with_centralized(&model, &artifacts, &session, &request, &params)?;
    println!("input gap {:.2e}, objective gap {:.2e}", report.input_gap, report.objective_gap);
    Ok(())
}

/// Keeps only the first few telemetry lines.
trait FirstLines: std::io::Write + Sized {
    fn by_ref_lines(self, n: usize) -> Head<Self> {
        Head { inner: self, left: n }
    }
}

impl<W: std::io::Write> FirstLines for W {}

struct Head<W> {
    inner: W,
    left: usize,
}

impl<W: std::io::Write> std::io::Write for Head<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        if self.left > 0 {
            self.inner.write_all(buf)?;
            self.left -= buf.iter().filter(|&&b| b == b'\n').count().min(self.left);
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

//! Local budget rows for a star and a ring of five subsystems.

use dmpsc::certifier::NegotiationRows;

fn show(name: &str, neighborhoods: &[Vec<usize>]) {
    let rows = NegotiationRows::new(neighborhoods);
    println!("{name}:");
    for (owner, terms) in &rows.rows {
        let text: Vec<String> = terms.iter().map(|(j, c)| format!("{c:.3}*db{}", j + 1)).collect();
        println!("  row of {}: {} = 0", owner + 1, text.join(" + "));
    }
    for j in &rows.pinned {
        println!("  db{} = 0 (pinned)", j + 1);
    }
}

fn main() {
    let star = vec![vec![0, 1, 2, 3, 4], vec![0, 1], vec![0, 2], vec![0, 3], vec![0, 4]];
    show("star", &star);
    let ring: Vec<Vec<usize>> = (0..5).map(|i| vec![(i + 4) % 5, i, (i + 1) % 5]).collect();
    show("ring", &ring);
}

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use dsde_core::fbdsdep::{ConvergenceTrace, QuintupleSolution};
use dsde_core::paths::PathArray;
use dsde_core::randomness::TimeGrid;
use serde::Serialize;

/// One CSV cell.
#[derive(Debug, Clone, Copy)]
pub enum Cell {
    Int(usize),
    Real(f64),
    Empty,
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Self::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Self::Real(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Self::Empty, Self::Real)
    }
}

/// Reals are written with 17 significant digits so that files diff exactly.
fn write_cell(out: &mut impl Write, cell: Cell) -> io::Result<()> {
    match cell {
        Cell::Int(v) => write!(out, "{v}"),
        Cell::Real(v) => write!(out, "{v:.16e}"),
        Cell::Empty => Ok(()),
    }
}

/// Buffered CSV file with a fixed header.
pub struct CsvWriter {
    out: BufWriter<File>,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[String]) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out, columns: header.len() })
    }

    pub fn row(&mut self, cells: &[Cell]) -> io::Result<()> {
        debug_assert_eq!(cells.len(), self.columns);
        for (i, &c) in cells.iter().enumerate() {
            if i > 0 {
                self.out.write_all(b",")?;
            }
            write_cell(&mut self.out, c)?;
        }
        self.out.write_all(b"\n")
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.out.flush()
    }
}

fn labels(prefix: &str, width: usize) -> impl Iterator<Item = String> + '_ {
    (1..=width).map(move |i| format!("{prefix}{i}"))
}

/// Path arrays sharing one grid, written side by side as
/// `path,node,t,<prefix>1..` blocks; path ids are shifted by `offset`.
pub struct SolutionTable<'a> {
    pub grid: TimeGrid,
    pub blocks: Vec<(&'a str, &'a PathArray)>,
}

impl<'a> SolutionTable<'a> {
    pub fn quintuple(sol: &'a QuintupleSolution) -> Self {
        Self {
            grid: sol.grid,
            blocks: vec![("X", &sol.x), ("P", &sol.p), ("Y", &sol.y), ("Q", &sol.q), ("K", &sol.k)],
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["path", "node", "t"].iter().map(|s| s.to_string()).collect();
        for (prefix, arr) in &self.blocks {
            h.extend(labels(prefix, arr.width()));
        }
        h
    }

    pub fn write_rows(&self, csv: &mut CsvWriter, offset: usize) -> io::Result<()> {
        let paths = self.blocks.first().map_or(0, |(_, a)| a.paths());
        let mut cells = Vec::new();
        for path in 0..paths {
            for node in 0..self.grid.nodes() {
                cells.clear();
                cells.extend([Cell::Int(offset + path), Cell::Int(node), Cell::Real(self.grid.node(node))]);
                for (_, arr) in &self.blocks {
                    // Increment coefficients have no value at the terminal node.
                    if node < arr.nodes() {
                        cells.extend(arr.get(path, node).iter().map(|&v| Cell::Real(v)));
                    } else {
                        cells.extend(std::iter::repeat_n(Cell::Empty, arr.width()));
                    }
                }
                csv.row(&cells)?;
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut csv = CsvWriter::create(path, &self.header())?;
        self.write_rows(&mut csv, 0)?;
        csv.finish()
    }
}

pub fn write_trace(path: &Path, trace: &ConvergenceTrace) -> io::Result<()> {
    let header = ["step", "alpha", "delta", "inner_iters", "last_distance", "ratio"].map(String::from);
    let mut csv = CsvWriter::create(path, &header)?;
    for s in &trace.steps {
        csv.row(&[
            s.step.into(),
            s.alpha.into(),
            s.delta.into(),
            s.inner_iters.into(),
            s.last_distance().into(),
            s.max_ratio().into(),
        ])?;
    }
    csv.finish()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()
}

/// Output directory, created on first use.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: PathBuf) -> io::Result<Self> {
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

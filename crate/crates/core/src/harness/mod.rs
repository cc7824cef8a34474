//! Data preparation, sweeps and tabular output for the command-line tool.

pub mod data;
pub mod sweep;

pub use data::{
    fmt_f64, format_matrix_csv, ingest_csv, parse_matrix_csv, read_matrix_csv, whiten,
    write_matrix_csv, Orientation, RawDataset,
};
pub use sweep::{
    cell_seed, cells_csv, parse_sweep_csv, rates_csv, rates_table, run_seed, run_sweep, sweep_csv,
    BetaRecord, CellRow, InitScheme, RatesRow, RunRow, RunStatus, SweepConfig, SweepResult,
};

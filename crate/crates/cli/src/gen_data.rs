use sk_unet::phantom::{generate_dataset, DatasetConfig, MIN_SIZE};

use crate::config::{write_resolved, Resolver};
use crate::{CliError, CliResult, GenDataArgs};

pub fn run(a: GenDataArgs) -> CliResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let d = DatasetConfig::default();
    let out = r.path("out", a.out)?;
    let cfg = DatasetConfig {
        n_train: r.value("n_train", a.n_train, d.n_train)?,
        n_val: r.value("n_val", a.n_val, d.n_val)?,
        size: r.value("size", a.size, d.size)?,
        seed: r.value("seed", a.seed, d.seed)?,
        overwrite: r.flag("overwrite", a.overwrite)?,
    };
    let resolved = r.finish()?;
    if cfg.n_train == 0 || cfg.n_val == 0 {
        return Err(CliError::Usage("--n-train and --n-val must be >= 1".into()));
    }
    if cfg.size < MIN_SIZE || !cfg.size.is_multiple_of(2) {
        return Err(CliError::Usage(format!("--size must be even and >= {MIN_SIZE}, got {}", cfg.size)));
    }
    generate_dataset(&cfg, &out)?;
    write_resolved(&resolved, &out)?;
    log::info!(
        "wrote {} patients ({} train, {} val) to {}",
        cfg.n_train + cfg.n_val,
        cfg.n_train,
        cfg.n_val,
        out.display()
    );
    Ok(())
}

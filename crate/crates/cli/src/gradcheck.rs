use anyhow::anyhow;
use sk_unet::gradsuite;
use sk_unet::tensor::set_conv_backward_fault;

use crate::{CliError, CliResult, GradcheckArgs};

pub fn run(a: GradcheckArgs) -> CliResult {
    set_conv_backward_fault(a.inject_conv_fault);
    let start = std::time::Instant::now();
    let results = gradsuite::run(a.full)?;
    print!("{}", gradsuite::render(&results));
    println!("eps {:e}, tolerance {:e}, {:.2?}", gradsuite::EPS, gradsuite::TOLERANCE, start.elapsed());
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!("gradient check failed: {}", failed.join(", "))))
    }
}

//! Full-model finite-difference check on the toy paragraph.

use std::time::Instant;

use sgr_core::synthetic::toy_instance;
use sgr_core::trainer::full_model_grad_check;

fn main() -> sgr_core::Result<()> {
    let start = Instant::now();
    let report = full_model_grad_check(&toy_instance(), 16, 3, 1e-4)?;
    for p in &report.params {
        println!("{:<20} {:>6} {:.3e} {:.3e}", p.name, p.elements, p.max_relative_error, p.max_abs_error);
    }
    println!("loss {:.6} max rel {:.3e} passed {} in {:.1}s", report.loss, report.max_relative_error(), report.passed(), start.elapsed().as_secs_f64());
    Ok(())
}

//! Runs the finite-difference suite over every op, module and the micro
//! model, then repeats it with one backward rule deliberately broken.

use rtpca::gradcheck;
use rtpca::tensor::OpKind;

fn main() -> rtpca::Result<()> {
    let report = gradcheck::run(None)?;
    print!("{}", report.render());
    println!("all within tolerance: {}", report.passed());

    let broken = gradcheck::run(Some(OpKind::Softmax))?;
    let names: Vec<_> = broken.failing().iter().map(|r| r.name.clone()).collect();
    println!("with a corrupted softmax rule, failing: {}", names.join(", "));
    Ok(())
}

//! The three loss terms and the pooled metrics on a small hand-made mask.

use winlin::autodiff::Tape;
use winlin::data::{pad_to_multiple, SegSample};
use winlin::loss::{joint_loss, laplacian_boundary_forward};
use winlin::metrics::{compute_metrics, ConfusionCounts, MetricReport};
use winlin::Tensor;

fn main() -> winlin::Result<()> {
    let target = Tensor::<f64>::from_fn(&[1, 1, 6, 6], |i| ((1..5).contains(&(i / 6)) && (1..4).contains(&(i % 6))) as u8 as f64);
    println!("boundary of the target:\n{:?}", laplacian_boundary_forward(&target)?.data().chunks(6).collect::<Vec<_>>());

    let logits = target.map(|t| if t > 0.5 { 2.0 } else { -1.5 });
    let valid = Tensor::full(&[1, 1, 6, 6], 1.0);
    let tape = Tape::no_grad();
    let l = joint_loss(&tape, tape.constant(logits.clone()), &target, &valid)?;
    println!("loss terms {:?}", l.terms);

    let probs = logits.map(|x| 1.0 / (1.0 + (-x).exp()));
    println!("metrics: {}", compute_metrics(&probs, &target, &valid, 0.5)?);

    let m = MetricReport::from_counts(&ConfusionCounts { tp: 7574, fp: 1200, fn_: 1226, tn: 90000 });
    println!("IoU {:.4} -> F1 {:.4} (2 IoU / (1 + IoU) = {:.4})", m.iou, m.f1, 2.0 * m.iou / (1.0 + m.iou));

    let s = SegSample::new("s", Tensor::full(&[3, 20, 27], 0.5), Tensor::zeros(&[1, 20, 27]))?;
    let p = pad_to_multiple(&s, 32)?;
    println!("20x27 padded to {}x{}, {} valid pixels", p.height(), p.width(), p.valid.sum());
    Ok(())
}

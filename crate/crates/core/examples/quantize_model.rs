//! Post-training int8 quantization of CNN-Time: calibrate, compare decisions
//! with the float model, then save and reload the int8 container.

use tinychirp::nn::{build_cnn_time, forward, float_container, seeded_init, write_container, Activation};
use tinychirp::quant::{calibrate, load_quantized, quantized_forward, save_quantized};
use tinychirp::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = build_cnn_time();
    let weights = seeded_init(&model, 3);
    let calib: Vec<Activation> = (0..16)
        .map(|i| Activation::waveform(&synth::random_waveform(100 + i, 48_000)))
        .collect();
    let qm = calibrate(&model, &weights, &calib)?;
    for (i, p) in qm.activations.iter().enumerate().step_by(3) {
        println!("boundary {i:>2}: scale {:.3e} zero point {}", p.scale, p.zero_point);
    }

    let mut agree = 0;
    let mut worst = 0f32;
    for i in 0..32 {
        let x = Activation::waveform(&synth::random_waveform(1_000 + i, 48_000));
        let f = forward(&model, &weights, &x)?;
        let q = quantized_forward(&qm, &x)?;
        agree += usize::from((f[1] > f[0]) == (q[1] > q[0]));
        worst = worst.max((f[1] - q[1]).abs());
    }
    println!("top-1 agreement {agree}/32, worst |dP| {worst:.2e}");

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("cnn-time.i8.tcw");
    let int8_bytes = save_quantized(&qm, &path)?;
    let float_bytes = write_container(std::io::sink(), &float_container(&model, &weights)?)?;
    println!("container: int8 {int8_bytes} bytes, float {float_bytes} bytes");
    println!("reload identical: {}", load_quantized(&path)? == qm);
    Ok(())
}

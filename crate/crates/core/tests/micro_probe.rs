use candle_core::{DType, Device, Tensor};
use std::time::Instant;
use strudyn_core::nn::{softmax_last, Attention, LayerNorm, Mlp, ParamStore};

fn timeit(name: &str, mut f: impl FnMut()) {
    f();
    let n = 50;
    let t = Instant::now();
    for _ in 0..n {
        f();
    }
    println!("{name}: {:?}/iter", t.elapsed() / n);
}

#[test]
fn probe_primitives() {
    let dev = Device::Cpu;
    let mut ps = ParamStore::new(0, DType::F32);
    let attn = Attention::new(&mut ps, "a", 64, 4).unwrap();
    let ln = LayerNorm::new(&mut ps, "ln", 64).unwrap();
    let mlp = Mlp::new(&mut ps, "m", 64, 256).unwrap();
    let x = Tensor::randn(0f32, 1.0, (16, 64, 64), &dev).unwrap();
    let scores = Tensor::randn(0f32, 1.0, (16, 4, 64, 64), &dev).unwrap();
    let a1024 = Tensor::randn(0f32, 1.0, (1024, 64), &dev).unwrap();
    let b64 = Tensor::randn(0f32, 1.0, (64, 64), &dev).unwrap();
    let b64t = b64.t().unwrap();

    timeit("matmul 1024x64@64x64 contig", || { let _ = a1024.matmul(&b64).unwrap(); });
    timeit("matmul 1024x64@64x64 transposed rhs", || { let _ = a1024.matmul(&b64t).unwrap(); });
    timeit("softmax 262k", || { let _ = softmax_last(&scores).unwrap(); });
    timeit("max_keepdim 262k", || { let _ = scores.max_keepdim(3).unwrap(); });
    timeit("sum_keepdim 262k", || { let _ = scores.sum_keepdim(3).unwrap(); });
    timeit("exp 262k", || { let _ = scores.exp().unwrap(); });
    timeit("broadcast_sub 262k", || {
        let m = scores.max_keepdim(3).unwrap();
        let _ = scores.broadcast_sub(&m).unwrap();
    });
    timeit("layernorm 65k", || { let _ = ln.forward(&x).unwrap(); });
    timeit("mlp 65k", || { let _ = mlp.forward(&x).unwrap(); });
    timeit("attention self", || { let _ = attn.forward(&x, &x, None).unwrap(); });
    timeit("gelu_erf 65k", || { let _ = x.gelu_erf().unwrap(); });
}

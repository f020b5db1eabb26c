use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segnas_core::genome::Genome;
use segnas_core::graph::{AuxHead, FeatureDesc, GraphIR};
use segnas_core::nn::{Mode, Network, Tensor};

fn sources() -> [FeatureDesc; 4] {
    [
        FeatureDesc::new(4, 8, 8, 2),
        FeatureDesc::new(6, 4, 4, 4),
        FeatureDesc::new(8, 2, 2, 8),
        FeatureDesc::new(8, 2, 2, 16),
    ]
}

fn inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
    sources()
        .iter()
        .map(|d| {
            let len = 2 * d.channels * d.pixels();
            Tensor::new(
                [2, d.channels, d.height, d.width],
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        })
        .collect()
}

/// Returns the bit patterns of the main logits, training-mode then eval-mode.
fn main_bits(net: &mut Network<f32>, x: &[Tensor<f32>]) -> (Vec<u32>, Vec<u32>) {
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let train = bits(net.forward(x, Mode::Train).unwrap().main_logits());
    let eval = bits(net.forward(x, Mode::Eval).unwrap().main_logits());
    (train, eval)
}

#[test]
fn auxiliary_heads_never_touch_the_main_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50 {
        let genome = Genome::sample_uniform(&mut rng);
        let aux = if trial % 2 == 0 { AuxHead::Cell } else { AuxHead::Classifier };
        let with = GraphIR::build(&genome, sources(), 6, 4, aux);
        let without = GraphIR::build(&genome, sources(), 6, 4, AuxHead::None);
        let mut a: Network<f32> = Network::new(with, &mut rng);
        let mut b: Network<f32> = Network::new(without, &mut rng);
        let copied = b.store.copy_matching(&a.store);
        assert_eq!(copied, b.store.len(), "{genome}: main path not fully shared");
        let mut stripped = a.strip_aux();
        let x = inputs(&mut rng);
        let ra = main_bits(&mut a, &x);
        let rb = main_bits(&mut b, &x);
        let rs = main_bits(&mut stripped, &x);
        assert_eq!(ra, rb, "{genome} with {}", aux.name());
        assert_eq!(ra, rs, "{genome} stripped");
    }
}

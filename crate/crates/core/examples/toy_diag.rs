// scratch: weight-decay and pad-size sweep for the padding experiment
use advmal::attacks::AttackConfig;
use advmal::network::*;
use advmal::svgd::*;
use advmal::toyps::*;

fn main() {
    for (wd, pad, epochs) in [
        (0.0, 1200usize, 6usize),
        (3e-3, 1200, 10),
        (1e-2, 1200, 10),
        (3e-2, 1200, 10),
        (1e-2, 1500, 14),
    ] {
        let mut clean_det = Vec::new();
        let mut adv_det = Vec::new();
        for seed in 0..2u64 {
            let gen = ToyGenConfig { n_programs: 500, seed, ..Default::default() };
            let programs = gen_programs(&gen).unwrap();
            let n_eval = 150;
            let eval: Vec<ToyProgram> = programs[..n_eval].iter().filter(|(_,y)| *y==1).map(|(z,_)| z.clone()).collect();
            let train_progs: Vec<(ToyProgram,u8)> = programs[n_eval..].to_vec();
            let data = programs_to_dataset(&train_progs, "toy").unwrap();
            let arch = Architecture::uniform(vec![TOY_FEATURE_DIM, 64, 32, 1], Activation::Elu, true).unwrap();
            let upsilon = eval.iter().map(|z| pad_displacement_bound(z, pad)).fold(0.0f64, f64::max);
            let base = TrainConfig {
                n_particles: 3, epochs, batch_size: 128, learning_rate: 1e-3,
                seed, weight_decay: wd, ..TrainConfig::new(arch)
            };
            let clean = train(&data, &data, &base).unwrap();
            let advm = train(&data, &data, &TrainConfig { adv: Some(AttackConfig::eot_pgd(upsilon)), ..base }).unwrap();
            let attack = ToyAttack::Pad { n_bytes: pad, byte_val: 0xA9 };
            let rc = lemma1_check(&clean, &eval, &attack, &UpsilonSpec::ball(upsilon)).unwrap();
            let ra = lemma1_check(&advm, &eval, &attack, &UpsilonSpec::ball(upsilon)).unwrap();
            clean_det.push((rc.detection_rate_clean, rc.detection_rate_attacked));
            adv_det.push((ra.detection_rate_clean, ra.detection_rate_attacked));
        }
        println!("wd={wd:.0e} pad={pad} ep={epochs}: clean model (pre,post)={clean_det:?} adv model={adv_det:?}");
    }
}

// scratch calibration for smoke-test hyperparameters (deleted before ship)
use fundus_lab::config::RunConfig;
use fundus_lab::dataio::{synth_generate, SynthParams};
use fundus_lab::fgcnet::FgcNet;
use fundus_lab::nn::ParamStore;
use fundus_lab::trainer::{train_fgcnet, load_model, LoadedModel};
use std::time::Instant;

fn main() {
    for (train_seed, synth_seed, stem) in [(61u64, 62u64, 6usize), (61, 62, 8), (5, 11, 8)] { let (lr, batch, age_lo, age_hi) = (0.01f64, 4usize, 30u32, 50u32);
        let t = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let params = SynthParams { count: 32, seed: synth_seed, image_size: 64, age_range: (age_lo, age_hi), ..Default::default() };
        let manifest = synth_generate(&params, dir.path()).unwrap();
        let mut run = RunConfig::default();
        run.train.seed = train_seed;
        run.train.max_epochs = 50;
        run.train.batch_size = batch;
        run.train.initial_lr = lr;
        run.train.early_stop_patience = 50;
        run.train.folds = 4;
        run.fgcnet.input_size = 64;
        run.fgcnet.stem_filters = stem;
        run.fgcnet.latent_dim = 16;

        let mut store0 = ParamStore::new();
        let net0 = FgcNet::build(run.fgcnet.clone(), &mut store0, run.train.seed).unwrap();
        let all: Vec<usize> = (0..32).collect();
        let (imgs, all_ages, _) = fundus_lab::dataio::load_batch(&manifest, &all, 64).unwrap();
        let recon = |net: &FgcNet, store: &ParamStore| -> f64 {
            let (gen, _, _) = net.generate(store, &imgs, &all_ages, 99).unwrap();
            gen.data().iter().zip(imgs.data()).map(|(a,b)| (a-b).abs()).sum::<f64>() / gen.numel() as f64
        };
        let before = recon(&net0, &store0);
        let rundir = dir.path().join("run");
        let result = train_fgcnet(&run, &manifest, 0, &rundir).unwrap();
        let last_epoch = result.history.len() - 1;
        let final_ckpt = rundir.join(format!("epoch-{last_epoch}.ckpt"));
        let (model, _) = load_model(&final_ckpt).unwrap();
        let after = if let LoadedModel::Fgc(net1, store1) = model { recon(&net1, &store1) } else { unreachable!() };
        let h0 = &result.history[0];
        let hl = &result.history[last_epoch];
        println!("seeds=({train_seed},{synth_seed}) lr={lr} batch={batch} stem={stem} ages=({age_lo},{age_hi}): recon {before:.4} -> {after:.4} (ratio {:.3}); tlf train {:.2}->{:.2} val {:.2}->{:.2}; {:.0?}",
                 after/before, h0.train_loss, hl.train_loss, h0.val_loss, hl.val_loss, t.elapsed());
    }
}

import os
from dotenv import load_dotenv
from zeroshotnmt.logs import configure_logging
from zeroshotnmt.models.config import ExperimentConfig
from zeroshotnmt.runner import ExperimentRunner

load_dotenv()
configure_logging()


# A small baseline run and the same run with the attention residual removed at layer 2.
for name, removal_layer in (('baseline', None), ('modified', 2)):
    config = ExperimentConfig(
        task={'num_languages': 4, 'sentences_per_direction': 2000, 'multiway': True},
        model={'num_encoder_layers': 3, 'num_decoder_layers': 3, 'residual_removal_layer': removal_layer},
        training={'max_epochs': int(os.getenv('EPOCHS', '10'))},
        output_dir=os.path.join(os.getenv('RUNS_DIR', 'runs'), name),
        seed=int(os.getenv('SEED', '1')))

    runner = ExperimentRunner(config)
    runner.train()
    report = runner.evaluate()
    print(name, 'zero-shot BLEU', report.averages.get('zero-shot'))

# Probing the modified model.
# runner.probe(['position_id'])
# runner.svcca()
